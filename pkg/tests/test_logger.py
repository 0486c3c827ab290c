import logging
import os

import pytest

from modules import app_logger


# Close handlers so every test sees a fresh logger writing into its own directory
@pytest.fixture(autouse=True)
def clean_loggers(tmp_path, monkeypatch):
    monkeypatch.setenv("ROUTEFUSE_LOG_DIR", str(tmp_path / "logs"))
    names = ["routefuse", "training", "test_logger"]

    def release():
        for name in names:
            logger = logging.getLogger(name)
            for handler in logger.handlers[:]:
                handler.close()
                logger.removeHandler(handler)

    release()
    yield tmp_path / "logs"
    release()


def test_setup_logger_creates_file(clean_loggers):
    """setup_logger creates the log directory and file"""
    logger = app_logger.setup_logger()

    assert os.path.exists(clean_loggers / "routefuse.log")
    assert logger.name == "routefuse"
    assert logger.level == logging.INFO


def test_setup_training_logger_creates_file(clean_loggers):
    logger = app_logger.setup_training_logger()

    assert os.path.exists(clean_loggers / "training.log")
    assert logger.name == "training"


def test_logger_writes_to_file(clean_loggers):
    """Messages reach the rotating file handler"""
    logger = app_logger.setup_logger(name="test_logger", log_file="test.log")
    logger.info("step 3 total=0.51234")
    for handler in logger.handlers:
        handler.flush()

    content = (clean_loggers / "test.log").read_text()
    assert "step 3 total=0.51234" in content
    assert "test_logger - INFO" in content


def test_handlers_are_not_duplicated():
    first = app_logger.setup_logger()
    second = app_logger.setup_logger()
    assert first is second
    assert len(second.handlers) == 2
