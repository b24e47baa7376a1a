from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from forest_nmt._flags import FlagAdapter
from forest_nmt.exceptions import ErrorList, error_detail


class Dependant:
    def __init__(self, *, flags: Optional[Dict[str, FlagAdapter]] = None) -> None:
        self.flags = flags or {}

    def by_name(self) -> Dict[str, str]:
        return {flag.name: param_name for param_name, flag in self.flags.items()}

    def parse_argv(self, argv: Sequence[str]) -> Tuple[Dict[str, Any], ErrorList]:
        """Split ``argv`` into raw values per parameter.

        Accepts ``--name value`` and ``--name=value``; switches take no value.
        Every problem is collected rather than stopping at the first one.
        """
        names = self.by_name()
        received: Dict[str, Any] = {}
        errors: ErrorList = []
        position = 0
        while position < len(argv):
            token = argv[position]
            position += 1
            if not token.startswith("--"):
                errors.append(
                    error_detail("unexpected_argument", f"unexpected argument {token!r}", loc=("flag", token), input=token)
                )
                continue
            name, has_inline, inline = token.partition("=")
            param_name = names.get(name)
            if param_name is None:
                errors.append(error_detail("unknown_flag", f"unknown flag {name}", loc=("flag", name), input=token))
                continue
            flag = self.flags[param_name]
            if param_name in received:
                errors.append(error_detail("duplicate_flag", f"{name} given twice", loc=("flag", name), input=token))
                continue
            if not flag.takes_value:
                if has_inline:
                    errors.append(
                        error_detail("unexpected_value", f"{name} takes no value", loc=("flag", name), input=inline)
                    )
                    continue
                received[param_name] = True
                continue
            if has_inline:
                received[param_name] = inline
            elif position < len(argv) and not argv[position].startswith("--"):
                received[param_name] = argv[position]
                position += 1
            else:
                errors.append(error_detail("missing_value", f"{name} needs a value", loc=("flag", name)))
        return received, errors

    def solve_flags(self, received: Dict[str, Any]) -> Tuple[Dict[str, Any], ErrorList]:
        solved: Dict[str, Any] = {}
        errors: ErrorList = []
        for param_name, flag in self.flags.items():
            loc: Tuple[str, ...] = (flag.loc, flag.name)
            if param_name not in received:
                if flag.required:
                    error = ValidationError.from_exception_data(
                        "Field required",
                        [
                            {
                                "type": "missing",
                                "loc": loc,
                                "input": None,
                            }
                        ],
                    ).errors()[0]
                    errors.append(error)
                else:
                    solved[param_name] = flag.default
                continue
            value, _errors = flag.validate(received[param_name], loc=loc)
            if _errors:
                errors.extend(_errors)
                continue
            solved[param_name] = value
        return solved, errors

    def solve(self, argv: Sequence[str]) -> Tuple[Dict[str, Any], ErrorList]:
        received, errors = self.parse_argv(argv)
        solved, _errors = self.solve_flags(received)
        return solved, errors + _errors

    def usage(self) -> List[str]:
        lines = []
        for flag in self.flags.values():
            spelling = flag.name if not flag.takes_value else f"{flag.name} VALUE"
            note = "required" if flag.required else f"default: {flag.default!r}"
            if not flag.takes_value:
                note = "switch"
            text = f"  {spelling:<28} {note}"
            if flag.description:
                text += f"; {flag.description}"
            lines.append(text)
        return lines
