"""Smoke test for the Python bindings.

Build and install first:
    pip install --no-build-isolation ./crates/python
then run from the repository root:
    python python/smoke_test.py
"""

import pathlib
import tempfile

import sketchql_py as sq

ROOT = pathlib.Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "crates" / "core" / "tests" / "fixtures"


def main() -> None:
    appendix = (FIXTURES / "appendix_output.sql").read_text()

    sketch = sq.decompose(appendix)
    assert sketch.cte_names == ["FINANCIALS", "VIEWERSHIP", "CALCULATIONS"], sketch
    assert len(sketch) == 3
    d = sketch.to_dict()
    assert d["final"]["ORDERs"] == ["SPORT_RANK"]
    rebuilt = sq.QuerySketch.from_dict(d).recompose()
    assert sq.normalize(rebuilt) == sq.normalize(sketch.recompose())

    try:
        sq.decompose("SELEC 1")
    except sq.SketchqlError:
        pass
    else:
        raise AssertionError("bad SQL must raise")

    assert sq.correction_pattern("SELECT A FROM T", "SELECT A FROM T") is None
    assert sq.correction_pattern("SELECT X FROM T", "SELECT -1 * (X) FROM T") == "+[* - 1] -[]"

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        (tmp / "logs").mkdir()
        (tmp / "docs").mkdir()
        (tmp / "logs" / "rpv.sql").write_text((FIXTURES / "rpv_example.sql").read_text())
        (tmp / "docs" / "guide.txt").write_text((FIXTURES / "instructions.txt").read_text())

        engine = sq.Engine.with_sample_data(str(tmp / "kb"), str(FIXTURES / "appendix_responses.json"))
        report = engine.preprocess(logs=str(tmp / "logs"), docs=str(tmp / "docs"))
        assert report["examples"] == 1 and report["tables"] == 2, report
        assert report["instructions"] >= 10, report

        response = engine.query(
            "Top 5 and bottom 5 US sports by quarter-over-quarter RPV change in Q2 2023"
        )
        assert response["status"] == "clean", response["status"]
        assert sq.normalize(response["sql"]) == sq.normalize(appendix)
        assert response["model_calls"] <= 6
        assert response["preview"]["row_count"] > 0

        before = engine.version
        outcome = engine.feedback(response["request_id"], "accept")
        assert outcome["version"] == before + 1, outcome
        assert engine.request(response["request_id"])["feedback"][0]["version"] == before + 1
        assert engine.summary()["examples"] == 2

    print("python smoke test passed")


if __name__ == "__main__":
    main()
