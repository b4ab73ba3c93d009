import json

import pytest
from hypothesis import given, settings, strategies as st

from weakseg3d.config import RunConfig, from_doc, load, parse, render, to_doc
from weakseg3d.errors import InvalidArgumentError


def test_default_round_trip():
    cfg = RunConfig()
    assert parse(render(cfg)) == cfg
    assert render(parse(render(cfg))) == render(cfg)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    ratio=st.floats(0.05, 1.0),
    kind=st.sampled_from(["hybrid", "scribble_star", "scribble_dilation", "tight_box_only"]),
    lw=st.floats(0, 5),
    lp=st.floats(0.1, 200),
    family=st.sampled_from(["tube", "bifurcated_tube", "ellipsoid", "lobed_ellipsoid"]),
    levels=st.integers(2, 3),
    planar=st.booleans(),
)
def test_round_trip_modified(seed, ratio, kind, lw, lp, family, levels, planar):
    doc = {
        "seed": seed,
        "scheme": {"ratio": ratio, "kind": kind},
        "phantom": {"family": family},
        "pipeline": {
            "iter": {"lambda_w": lw, "lambda_p": lp},
            "net": {
                "levels": levels,
                "pooling_strides": [[1, 1, 1]] + [[2, 2, 2]] * (levels - 1),
                "kernel_sizes": [[3, 3, 3]] * levels,
            },
            "aug": {"dilation_planar": planar},
        },
    }
    cfg = from_doc(RunConfig, doc)
    assert cfg.seed == seed and cfg.scheme.kind == kind and cfg.pipeline.net.levels == levels
    assert parse(render(cfg)) == cfg


def test_partial_document_uses_defaults():
    cfg = parse('{"seed": 7}')
    assert cfg.seed == 7
    assert cfg.pipeline == RunConfig().pipeline


def test_numbers_normalized_to_float():
    cfg = parse('{"pipeline": {"iter": {"lambda_w": 1, "lambda_p": 100}}}')
    assert isinstance(cfg.pipeline.iter.lambda_w, float)
    assert to_doc(cfg)["pipeline"]["iter"]["lambda_p"] == 100.0


@pytest.mark.parametrize(
    "doc, fragment",
    [
        ({"bogus": 1}, "bogus"),
        ({"pipeline": {"iter": {"lambdaw": 1}}}, "pipeline.iter"),
        ({"pipeline": {"ssn": {"seed": 3}}}, "seed"),  # derived, not configurable
        ({"seed": "x"}, "seed"),
        ({"seed": True}, "seed"),
        ({"phantom": {"neighbor": 1}}, "phantom.neighbor"),
        ({"scheme": {"ratio": 0}}, "scheme"),
        ({"experiment": {"ablations": ["nope"]}}, "ablations"),
        ({"phantom": {"dims": 32}}, "phantom.dims"),
    ],
)
def test_rejections(doc, fragment):
    with pytest.raises(InvalidArgumentError) as e:
        parse(json.dumps(doc))
    assert fragment in str(e.value)


def test_not_json(tmp_path):
    with pytest.raises(InvalidArgumentError):
        parse("{nope")
    p = tmp_path / "c.json"
    p.write_text(render(RunConfig(seed=3)))
    assert load(p).seed == 3
