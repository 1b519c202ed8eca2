import logging

from settings import Settings

logging.basicConfig(
    level=getattr(logging, Settings.LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s [%(levelname)s] %(message)s",
    handlers=[
        logging.StreamHandler(),
        logging.FileHandler(filename=Settings.LOG_FILE, encoding="utf-8", delay=True),
    ],
)

logger = logging.getLogger(Settings.TOOL_NAME)
