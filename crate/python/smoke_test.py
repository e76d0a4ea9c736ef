"""Smoke test for the `shaped` extension module.

Build and install first:

    pip install maturin
    pip install -e crates/python --no-build-isolation
    python python/smoke_test.py
"""

import math
import os
import tempfile

import shaped


def main():
    rows = shaped.synth(30, seed=3)
    labelled = [r for r in rows if r[2] is not None]
    assert len(rows) == 6 * 30 and len(labelled) == 4 * 30
    assert rows == shaped.synth(30, seed=3)

    r = shaped.rouge("the cat sat", "the cat sat down")
    assert r["rougeL"][0] == 1.0 and r["rougeL"][1] == 0.75
    assert math.isclose(r["rougeL"][2], 6 / 7)
    assert math.isclose(shaped.rouge("a b b", "a b c")["rouge1"][2], 2 / 3)

    config = "\n".join([
        "variant = shaped",
        "steps = 30",
        "batch = 4",
        "embed = 8",
        "hidden = 8",
        "log_every = 10",
        "lr = 0.1",
        "adagrad_init = 0.1",
    ])
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ck")
        losses = shaped.train(labelled, path, config)
        assert len(losses) == 3 and all(math.isfinite(x) for x in losses)

        model = shaped.Model.load(path)
        assert model.styles == ["courier", "gazette", "herald", "tribune"]
        assert model.variant == "shaped"
        source = labelled[0][0]
        post = model.posterior(source)
        assert math.isclose(sum(post.values()), 1.0, abs_tol=1e-9)
        out = model.generate(source, mode="mixture", max_len=6)
        assert out == model.generate(source, mode="mixture", max_len=6)
        assert len(out.split()) <= 6
        model.generate(source, mode="shaped:herald")

        try:
            model.generate(source, mode="shaped:nobody")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown style accepted")
        try:
            shaped.Model.load(os.path.join(tmp, "missing.ck"))
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
