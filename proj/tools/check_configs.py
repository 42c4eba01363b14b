#!/usr/bin/env python3
"""Validate JSON run configurations against docs/config.schema.json."""
import json
import sys
from pathlib import Path

import jsonschema


def main(argv):
    root = Path(__file__).resolve().parent.parent
    schema = json.loads((root / "docs" / "config.schema.json").read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    validator = jsonschema.Draft202012Validator(schema)
    paths = [Path(p) for p in argv[1:]] or sorted((root / "configs").glob("*.json"))
    bad = 0
    for path in paths:
        errors = list(validator.iter_errors(json.loads(path.read_text())))
        for e in errors:
            print(f"{path}: {'/'.join(map(str, e.absolute_path))}: {e.message}")
        bad += bool(errors)
        if not errors:
            print(f"{path.name}: ok")
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
