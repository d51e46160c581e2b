"""File naming convention for incoming plot images.

Incoming files are named ``<plot_type>_r<run>_s<seq>_t<ms>.<ext>`` with
ext one of png/ppm/pgm.  Plot type names may themselves contain
underscores; the three numeric fields are parsed from the right.
Numbers are canonical decimal (no leading zeros), so format and parse
are exact inverses in both directions.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import MalformedName

SUPPORTED_EXTENSIONS = ("png", "ppm", "pgm")

_CANON = r"(0|[1-9][0-9]*)"
_NAME_RE = re.compile(
    rf"^(?P<name>.+)_r(?P<run>{_CANON})_s(?P<seq>{_CANON})_t(?P<ms>{_CANON})"
    rf"\.(?P<ext>{'|'.join(SUPPORTED_EXTENSIONS)})$")


@dataclass(frozen=True)
class FileNameFields:
    plot_type_name: str
    run_number: int
    sequence: int
    capture_time_ms: int
    extension: str = "pgm"


def parse_filename(name: str) -> FileNameFields:
    """Split a file name into its convention fields; raises MalformedName."""
    m = _NAME_RE.match(name)
    if m is None:
        raise MalformedName(f"file name {name!r} does not follow the naming convention")
    return FileNameFields(m.group("name"), int(m.group("run")),
                          int(m.group("seq")), int(m.group("ms")), m.group("ext"))


def format_filename(fields: FileNameFields) -> str:
    """Inverse of parse_filename."""
    return (f"{fields.plot_type_name}_r{fields.run_number}"
            f"_s{fields.sequence}_t{fields.capture_time_ms}.{fields.extension}")
