"""Logging setup for the command line entry point

Library modules only create loggers via `logging.getLogger(__name__)`;
handlers are installed here, once, by the CLI.
"""

import logging

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def configure_logging(level: str | int = 'WARNING') -> logging.Logger:
    """Install a single stderr handler on the package logger

    Parameters
    ----------
    level : str | int
        A logging level name ("DEBUG", "INFO", ...) or number.

    Returns
    -------
    logging.Logger
        The `confmaplib` package logger.

    Raises
    ------
    ValueError
        If level is a name that logging does not know.
    """
    if isinstance(level, str):
        resolved = logging.getLevelName(level.upper())
        if not isinstance(resolved, int):
            msg = f'{level} is not a valid log level'
            raise ValueError(msg)
        level = resolved
    logger = logging.getLogger('confmaplib')
    logger.setLevel(level)
    # Re-configuring replaces our handler instead of stacking a second one
    for handler in list(logger.handlers):
        if getattr(handler, '_confmaplib', False):
            logger.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._confmaplib = True
    logger.addHandler(handler)
    return logger
