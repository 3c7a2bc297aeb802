import logging
from logging.handlers import TimedRotatingFileHandler
import os

LOG_FILE_BACKUP_COUNT = int(os.getenv('LOG_FILE_BACKUP_COUNT', '30'))
LOG_ROTATION = "midnight"

__version__ = "1.0.0"


def configure_logger(name):  # pragma: no cover
    log_level = os.getenv("APP_LOG_LEVEL", "WARNING")
    log_dir = os.getenv("LOG_DIR", "logs/")

    logger = logging.getLogger(name)
    logger.setLevel(log_level)
    # Processes and worker pools call this repeatedly for the same name
    if logger.handlers:
        return logger

    formatter = logging.Formatter(
        '%(levelname)s - %(asctime)s - %(name)s - %(message)s')

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    # Defaults to console logging
    if os.getenv("CONSOLE_LOGGING_ONLY", "true") == "false":
        os.makedirs(log_dir, exist_ok=True)
        file_handler = TimedRotatingFileHandler(
            filename=os.path.join(log_dir, "icode_rca.log"),
            when=LOG_ROTATION,
            backupCount=LOG_FILE_BACKUP_COUNT
        )
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger
