"""Functions for generating the JSON report of a run."""

import json

from definitions import REPORT_SCHEMA, REPORT_SCHEMA_VERSION
from errors import BenchError
from trainer.checkpoint import atomic_write

JSON_TYPES = {
    "object": dict,
    "array": list,
    "string": str,
    "integer": int,
    "number": (int, float),
    "null": type(None),
}


def get_report(result):
    """Get the report of a run.

    :param result: ``experiment.run_experiment`` return value
    :type result: experiment.RunResult
    :return: Report following ``assets/report_schema.json``
    :rtype: dict
    """
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": result.config,
        "history": [e.to_dict() for e in result.history],
        "wall_time_seconds": result.wall_time_seconds,
        "seed": result.seed,
        "status": result.status,
        "error": result.error,
    }


def _type_ok(instance, expected):
    names = expected if isinstance(expected, list) else [expected]
    for name in names:
        if isinstance(instance, bool) and name in ("integer", "number"):
            continue
        if isinstance(instance, JSON_TYPES[name]):
            return True
    return False


def get_schema_errors(instance, schema=None, path="report"):
    """Check ``instance`` against the ``type``, ``required``,
    ``properties`` and ``items`` keywords of a schema.

    :param instance: Decoded JSON value
    :param schema: Schema, the shipped report schema by default
    :type schema: dict | None
    :return: One message per violation
    :rtype: list[str]
    """
    schema = REPORT_SCHEMA if schema is None else schema
    if "type" in schema and not _type_ok(instance, schema["type"]):
        return ["%s: expected %s, got %s" % (path, schema["type"],
                                             type(instance).__name__)]
    ret = []
    if isinstance(instance, dict):
        ret += ["%s: missing %r" % (path, k)
                for k in schema.get("required", ()) if k not in instance]
        for k, sub in schema.get("properties", {}).items():
            if k in instance:
                ret += get_schema_errors(instance[k], sub, "%s.%s" % (path, k))
    if isinstance(instance, list) and "items" in schema:
        for i, e in enumerate(instance):
            ret += get_schema_errors(e, schema["items"], "%s[%s]" % (path, i))
    return ret


def get_report_text(report):
    """Serialize a report; the same report always gives the same bytes.

    :raise BenchError: The report does not follow the schema
    """
    errors = get_schema_errors(report)
    if errors:
        raise BenchError("report does not follow schema: %s"
                         % "; ".join(errors))
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def write_report(path, report):
    text = get_report_text(report)
    atomic_write(path, lambda fp: fp.write(text.encode("utf-8")))
