"""Smoke test for the persd extension module.

Build and run:
    cargo build -p persd-py --release --features extension-module
    cp target/release/libpersd.so python/persd.so
    python3 python/smoke_test.py
"""

import json
import math

import persd

TASK = {
    "id": "inc",
    "instruction": 'def inc(x):\n    """\n    >>> inc(1)\n    2\n    """\n',
    "unit_tests": [],
    "canonical_code": "def inc(x):\n    return x + 1",
    "origin": "benchmark",
}


def main():
    assert math.isclose(persd.pass_at_k(5, 2, 3), 0.9)
    assert persd.pass_at_k(3, 3, 1) == 1.0
    try:
        persd.pass_at_k(2, 3, 1)
    except ValueError as e:
        assert "domain_error" in str(e)
    else:
        raise AssertionError("c > n must be rejected")

    assert persd.function_header(TASK["instruction"]) == "def inc(x):"

    seen = json.loads(persd.extract_seen_tests(json.dumps(TASK)))
    assert [t["assertion"] for t in seen] == ["assert inc(1) == 2"]

    feedback = {"status": "test_failure", "message": "AssertionError", "per_test": [], "wall_time_ms": 0}
    prompt = persd.render_refinement_instruction(json.dumps(TASK), "def inc(x):\n    return x", json.dumps(feedback))
    assert "return x" in prompt

    records = persd.emit_variant("stand", json.dumps(TASK), "", "").splitlines()
    assert len(records) == 1

    judgments = "\n".join(
        json.dumps({"test_task_id": t, "train_task_id": "x", "category": c, "score": s, "rationale": ""})
        for t, c, s in [("a", "leak", 1.0), ("b", "somewhat_similar", 0.75), ("c", "not_related", 0.0), ("d", "somewhat_not_similar", 0.25)]
    )
    leak, mean = persd.overlap_report(judgments)
    assert (leak, mean) == (25.0, 0.5)

    train = "\n".join(json.dumps(dict(TASK, id=i, instruction=text)) for i, text in [("a", "sort a list"), ("b", "reverse a string")])
    hits = persd.retrieve_neighbors("reverse the string", train, 1)
    assert hits[0][0] == "b"

    assert persd.category_score("somewhat similar") == 0.75
    print("persd smoke test ok")


if __name__ == "__main__":
    main()
