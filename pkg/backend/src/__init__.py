# Constant depth decision rule toolkit
