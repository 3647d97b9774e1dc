# core/json_utils.py
import json
import re
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator


def parse_json_lenient(raw: str) -> Any:
    """
    Parses hand-edited JSON (spec files, configs pasted from notes).
    Tries: direct JSON → fenced ```json → light repairs (comments, trailing commas, BOM).
    """
    # direct
    try:
        return json.loads(raw)
    except Exception:
        pass

    # fenced
    m = re.search(r"```json\s*(.+?)\s*```", raw, flags=re.DOTALL | re.IGNORECASE)
    if m:
        raw = m.group(1).strip()
        try:
            return json.loads(raw)
        except Exception:
            pass

    repaired = raw.replace("\ufeff", "")
    repaired = re.sub(r"^\s*//.*?$", "", repaired, flags=re.MULTILINE)
    repaired = re.sub(r"/\*.*?\*/", "", repaired, flags=re.DOTALL)
    repaired = re.sub(r",\s*([}\]])", r"\1", repaired)
    try:
        return json.loads(repaired.strip())
    except Exception as e:
        raise ValueError(f"Could not parse JSON: {e}") from e


def load_json(path: Path) -> Any:
    return parse_json_lenient(Path(path).read_text(encoding="utf-8"))


def dump_json(obj: Any, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


def jsonl_line(record: Dict[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(", ", ": ")) + "\n"


def write_jsonl(records: Iterable[Dict[str, Any]], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(jsonl_line(rec))


def append_jsonl(record: Dict[str, Any], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8", newline="\n") as fh:
        fh.write(jsonl_line(record))


def iter_jsonl(path: Path) -> Iterator[Dict[str, Any]]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON line ({e.msg})") from e
