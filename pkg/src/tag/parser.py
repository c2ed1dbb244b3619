import json
from pathlib import Path
from typing import Any, Union

from pydantic import ValidationError

from ..exceptions import ParseError, SchemaError
from .models import JobSpec

SCHEMA_PATH = Path(__file__).resolve().parent.parent.parent / "schemas" / "job_spec.schema.json"


def _path(loc) -> str:
    return ".".join(str(part) for part in loc) or "$"


def parse_job_spec(text: Union[str, bytes, dict]) -> JobSpec:
    """
    Parse a job document into a JobSpec with defaults filled.

    Accepts JSON text or an already decoded mapping.
    Raises ParseError for malformed text and SchemaError naming the offending path.
    """
    if isinstance(text, dict):
        data: Any = text
    else:
        try:
            data = json.loads(text)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ParseError(f"malformed job document: {e}") from e

    if not isinstance(data, dict):
        raise SchemaError("job document must be an object", path="$")

    try:
        return JobSpec.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise SchemaError(first["msg"], path=_path(first["loc"])) from e


def serialize_job_spec(spec: JobSpec) -> str:
    return json.dumps(spec.to_document(), indent=2)


def load_job_spec(path: Union[str, Path]) -> JobSpec:
    return parse_job_spec(Path(path).read_text(encoding="utf-8"))


def job_spec_schema() -> dict:
    """The JSON-Schema document shipped with the repository"""
    return json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))
