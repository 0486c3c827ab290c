import logging
import os
from logging.handlers import RotatingFileHandler
import sys

from dotenv import load_dotenv

load_dotenv()

DEFAULT_LOG_DIR = "logs"


def get_log_dir():
    """Log directory, overridable with ROUTEFUSE_LOG_DIR"""
    return os.getenv("ROUTEFUSE_LOG_DIR", DEFAULT_LOG_DIR)


def setup_logger(name="routefuse", log_file="routefuse.log", level=logging.INFO):
    """Function to setup a logger; can be used for different log files"""

    # Ensure logs directory exists
    log_dir = get_log_dir()
    if not os.path.exists(log_dir):
        os.makedirs(log_dir)

    # Create logger
    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Check if logger already has handlers to avoid duplicates
    if not logger.handlers:
        # 1. File Handler (Rotating)
        log_path = os.path.join(log_dir, log_file)
        file_handler = RotatingFileHandler(log_path, maxBytes=10*1024*1024, backupCount=5)
        file_handler.setLevel(level)

        # 2. Console Handler
        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(level)

        formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        file_handler.setFormatter(formatter)
        console_handler.setFormatter(formatter)

        logger.addHandler(file_handler)
        logger.addHandler(console_handler)

    return logger


def setup_training_logger():
    """Setup specialized logger for training progress"""
    return setup_logger(name="training", log_file="training.log")
