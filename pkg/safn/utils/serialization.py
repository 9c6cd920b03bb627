from typing import Protocol, Any, Dict
import dataclasses
import json
import traceback
from enum import Enum
from pathlib import Path

import numpy as np

from safn.core import DataError, NumericError, Result, SafnError, ShapeError, UsageError

_EXCEPTION_REGISTRY: Dict[str, type[BaseException]] = {
    "Exception": Exception,
    "ValueError": ValueError,
    "ArithmeticError": ArithmeticError,
    "RuntimeError": RuntimeError,
    "FileNotFoundError": FileNotFoundError,
}


def register_exception(cls: type[BaseException], name: str | None = None) -> None:
    _EXCEPTION_REGISTRY[name or cls.__name__] = cls


for _cls in (SafnError, DataError, ShapeError, NumericError, UsageError):
    register_exception(_cls)


def _format_traceback(exc: BaseException) -> str | None:
    if exc.__traceback__ is None:
        return None
    return "".join(traceback.format_exception(type(exc), exc, exc.__traceback__))


class Serializer(Protocol):
    def dumps(self, obj: Any) -> bytes: ...
    def loads(self, data: bytes) -> Any: ...


class JsonSerializer(Serializer):
    """JSON with "__type__" tags for arrays, Results and exceptions; dataclasses encode as tagged dicts.

    ``canonical=True`` sorts keys and drops whitespace so equal objects give equal bytes.
    """

    def __init__(self, *, canonical: bool = False, indent: int | None = None):
        self.canonical = canonical
        self.indent = None if canonical else indent

    def dumps(self, obj: Any) -> bytes:
        return self.dumps_str(obj).encode("utf-8")

    def dumps_str(self, obj: Any) -> str:
        separators = (",", ":") if self.canonical else None
        return json.dumps(
            self._prepare(obj),
            default=self._default,
            sort_keys=self.canonical,
            separators=separators,
            indent=self.indent,
            allow_nan=True,
        )

    def loads(self, data: bytes | str) -> Any:
        text = data.decode("utf-8") if isinstance(data, bytes) else data
        return json.loads(text, object_hook=self._object_hook)

    def _prepare(self, obj: Any) -> Any:
        # Enum-keyed mappings need string keys before json sees them.
        if isinstance(obj, dict):
            return {(k.value if isinstance(k, Enum) else k): self._prepare(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [self._prepare(v) for v in obj]
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return self._default(obj)
        return obj

    def _default(self, obj: Any) -> Any:
        if isinstance(obj, Result):
            return {
                "__type__": "Result",
                "ok": obj.ok,
                "value": self._prepare(obj.value),
                "error": obj.error,
            }
        if isinstance(obj, np.ndarray):
            return {
                "__type__": "ndarray",
                "dtype": str(obj.dtype),
                "shape": list(obj.shape),
                "data": obj.ravel().tolist(),
            }
        if isinstance(obj, np.generic):
            return obj.item()
        if isinstance(obj, Enum):
            return obj.value
        if isinstance(obj, (set, frozenset)):
            return sorted(obj, key=str)
        if isinstance(obj, Path):
            return str(obj)
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            payload: Dict[str, Any] = {"__type__": type(obj).__name__}
            for f in dataclasses.fields(obj):
                if f.init:
                    payload[f.name] = self._prepare(getattr(obj, f.name))
            return payload
        if isinstance(obj, BaseException):
            return {
                "__type__": "Exception",
                "cls": obj.__class__.__name__,
                "message": str(obj),
                "traceback": _format_traceback(obj),
            }
        return str(obj)

    def _object_hook(self, dct: Dict[str, Any]) -> Any:
        if "__type__" not in dct:
            return dct
        t = dct["__type__"]
        if t == "Result":
            return Result(ok=dct["ok"], value=dct["value"], error=dct["error"])
        if t == "ndarray":
            return np.asarray(dct["data"], dtype=dct["dtype"]).reshape(dct["shape"])
        if t == "Exception":
            cls = _EXCEPTION_REGISTRY.get(dct.get("cls", "Exception"), Exception)
            return cls(dct.get("message", ""))
        return dct


def to_jsonable(obj: Any) -> Any:
    """Plain JSON-compatible structure (no tags kept for dataclasses)."""
    serializer = JsonSerializer()
    data = json.loads(serializer.dumps_str(obj))

    def strip(value: Any) -> Any:
        if isinstance(value, dict):
            return {k: strip(v) for k, v in value.items() if k != "__type__"}
        if isinstance(value, list):
            return [strip(v) for v in value]
        return value

    return strip(data)
