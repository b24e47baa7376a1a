from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic_core import ErrorDetails

ErrorList = List[Union[Dict[str, Any], ErrorDetails]]


def error_detail(
    type: str,
    msg: str,
    *,
    loc: Tuple[Any, ...] = (),
    input: Any = None,
    ctx: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    detail: Dict[str, Any] = {"type": type, "loc": loc, "msg": msg, "input": input}
    if ctx:
        detail["ctx"] = ctx
    return detail


class ForestNMTError(Exception):
    def __init__(self, errors: ErrorList) -> None:
        super().__init__()
        self.errors = errors

    @classmethod
    def single(
        cls,
        type: str,
        msg: str,
        *,
        loc: Tuple[Any, ...] = (),
        input: Any = None,
        ctx: Optional[Dict[str, Any]] = None,
    ) -> "ForestNMTError":
        return cls([error_detail(type, msg, loc=loc, input=input, ctx=ctx)])

    def __str__(self) -> str:
        lines = []
        for error in self.errors:
            loc = ".".join(str(part) for part in error.get("loc", ()))
            lines.append(f"{loc}: {error['msg']}" if loc else str(error["msg"]))
        return "; ".join(lines)


class DimensionError(ForestNMTError):
    pass


class ContractError(ForestNMTError):
    pass


class NumericError(ForestNMTError):
    pass


class ForestFormatError(ForestNMTError):
    pass


class CapacityError(ForestNMTError):
    pass


class DataError(ForestNMTError):
    pass


class AlignmentError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ConfigError(ForestNMTError):
    pass


class CheckFailure(ForestNMTError):
    pass


class InternalError(Exception):
    pass
