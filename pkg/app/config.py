import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    # Runtime knobs only; nothing here may change numeric results.
    LOG_LEVEL = os.getenv("QFT_LOG_LEVEL", "INFO").upper()
    WORKERS = max(1, int(os.getenv("QFT_WORKERS", 1)))
    SUMMARY_FORMAT = os.getenv("QFT_SUMMARY_FORMAT", "table").lower()

    VERSION = "0.1.0"
    SUMMARY_FORMATS = ["table", "json", "yaml"]

config = Config()
