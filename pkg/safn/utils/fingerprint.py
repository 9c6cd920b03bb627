import hashlib
import logging
from typing import Any

from safn.utils.serialization import Serializer, JsonSerializer, to_jsonable

logger = logging.getLogger(__name__)


def run_fingerprint(
    command: str,
    config: Any,
    *,
    serializer: Serializer | None = None,
    length: int = 12,
) -> str:
    """Stable short hash of a command and its resolved config; names run directories and log lines."""
    if serializer is None:
        serializer = JsonSerializer(canonical=True)

    data = {"command": command, "config": to_jsonable(config)}
    try:
        payload = serializer.dumps(data)
    except (TypeError, ValueError):
        payload = repr(data).encode("utf-8")

    key = hashlib.sha256(payload).hexdigest()[:length]
    logger.debug("Run fingerprint for %s: %s", command, key)
    return key


def file_digest(path: str, chunk_size: int = 1 << 16) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        while chunk := handle.read(chunk_size):
            digest.update(chunk)
    return digest.hexdigest()
