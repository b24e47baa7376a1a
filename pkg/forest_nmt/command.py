import inspect
from functools import update_wrapper
from typing import Annotated, Any, Callable, Dict, List, Optional, Sequence, get_args, get_origin

from pydantic_core import PydanticUndefined

from forest_nmt import _flags
from forest_nmt.dependant import Dependant
from forest_nmt.exception_handlers import EXIT_OK, handle_exception
from forest_nmt.exceptions import ConfigError


class CommandValidator:
    def __init__(self, call: Callable[..., Optional[int]], name: Optional[str] = None) -> None:
        self._call = call
        update_wrapper(self, call)
        self.name = name or call.__name__.removeprefix("cmd_").replace("_", "-")
        self.dependant: Dependant = self._get_dependant()

    def _update_field_info(
        self, field: _flags.FlagAdapter, param_name: str, param: inspect.Parameter
    ) -> None:
        _field_info = field.field_info
        _field_info.title = param_name
        if _field_info.default is PydanticUndefined and param.default is not inspect.Parameter.empty:
            if not isinstance(param.default, _flags.FlagAdapter):
                _field_info.default = param.default
        _field_info.annotation = param.annotation
        if get_origin(param.annotation) is Annotated:
            base, *metadata = get_args(param.annotation)
            metadata = [item for item in metadata if not isinstance(item, _flags.FlagAdapter)]
            _field_info.annotation = Annotated[(base, *metadata)] if metadata else base
        field.field_info = _field_info

    def _get_dependant(self) -> Dependant:
        dependant = Dependant()
        signature_params = inspect.signature(self._call).parameters

        field: _flags.FlagAdapter
        for param_name, param in signature_params.items():
            if get_origin(param.annotation) is Annotated:
                field = next(
                    item for item in get_args(param.annotation)[1:] if isinstance(item, _flags.FlagAdapter)
                )
            elif isinstance(param.default, _flags.FlagAdapter):
                field = param.default
            elif param.annotation is inspect.Parameter.empty:
                continue
            else:
                field = _flags.Flag(
                    title=param_name,
                    default=param.default
                    if param.default is not inspect.Parameter.empty
                    else PydanticUndefined,
                    annotation=param.annotation,
                )
            self._update_field_info(field, param_name, param)
            dependant.flags[param_name] = field
        return dependant

    def resolve(self, argv: Sequence[str]) -> Dict[str, Any]:
        solved, errors = self.dependant.solve(argv)
        if errors:
            raise ConfigError(errors)
        return solved

    def usage(self) -> str:
        lines: List[str] = [f"usage: forest-nmt {self.name} [flags]"]
        doc = inspect.getdoc(self._call)
        if doc:
            lines.append(doc.splitlines()[0])
        lines.extend(self.dependant.usage())
        return "\n".join(lines)

    def __call__(self, argv: Sequence[str] = ()) -> int:
        try:
            code = self._call(**self.resolve(argv))
        except Exception as exc:
            return handle_exception(exc)
        return EXIT_OK if code is None else int(code)

    def __repr__(self) -> str:
        return repr(self._call)


def command(func: Callable[..., Optional[int]]) -> CommandValidator:
    return CommandValidator(func)
