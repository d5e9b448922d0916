import sys
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables explicitly from backend/.env regardless of CWD
load_dotenv(dotenv_path=Path(__file__).parent / ".env")

from src.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
