import logging
import sys

from app.config import Config
from app.routes.commands import run_command

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def check_python_version():
    if sys.version_info < (3, 9):
        print("Python 3.9 or higher is required", file=sys.stderr)
        sys.exit(1)


def setup_logging(level: str):
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, force=True)


def main(argv=None) -> int:
    check_python_version()
    setup_logging(Config.LOG_LEVEL)

    try:
        run_command(argv)
    except Exception as exc:
        # One line per failure: type and message.
        message = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
