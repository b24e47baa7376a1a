import json
import logging
import sys
from typing import Any, Callable, Dict

from forest_nmt.exceptions import (
    CapacityError,
    CheckFailure,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    ForestFormatError,
    ForestNMTError,
    InternalError,
    NumericError,
)
from forest_nmt.utils import ErrorEncoder

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _report(kind: str, exc: ForestNMTError) -> None:
    sys.stderr.write(f"{kind}: {exc}\n")
    sys.stderr.write(json.dumps({"detail": exc.errors}, cls=ErrorEncoder) + "\n")


def config_error_handler(exc: ConfigError) -> int:
    _report("configuration error", exc)
    return EXIT_CONFIG


def data_error_handler(exc: ForestNMTError) -> int:
    _report("data error", exc)
    return EXIT_DATA


def numeric_error_handler(exc: NumericError) -> int:
    _report("numeric error", exc)
    return EXIT_NUMERIC


def check_failure_handler(exc: CheckFailure) -> int:
    _report("check failed", exc)
    return EXIT_CHECK_FAILED


def contract_error_handler(exc: ForestNMTError) -> int:
    _report("contract violation", exc)
    return EXIT_INTERNAL


def internal_error_handler(exc: Exception) -> int:
    logger.error("internal error", exc_info=exc)
    sys.stderr.write(f"internal error: {type(exc).__name__}: {exc}\n")
    return EXIT_INTERNAL


exception_handler: Dict[Any, Callable[[Any], int]] = {
    ConfigError: config_error_handler,
    DataError: data_error_handler,
    ForestFormatError: data_error_handler,
    CapacityError: data_error_handler,
    NumericError: numeric_error_handler,
    CheckFailure: check_failure_handler,
    ContractError: contract_error_handler,
    DimensionError: contract_error_handler,
    InternalError: internal_error_handler,
}


def handle_exception(exc: Exception) -> int:
    for cls in type(exc).__mro__:
        if cls in exception_handler:
            return exception_handler[cls](exc)
    return exception_handler[InternalError](exc)
