import numpy as np

from sanet.config import ModelConfig, dump_config, parse_config, RunConfig
from sanet.flops import ConvLayer, conv_macs, flops_count
from sanet.model import SANet
from sanet.tensor import SeededRng, Tape, Tensor

FIXTURE = [
    ConvLayer("a", 8, kernel=3, stride=2, padding=1),
    ConvLayer("b", 8, kernel=3, padding=1, groups=2),
    ConvLayer("c", 5, kernel=1, bias=True),
]


def test_single_layer_examples():
    assert flops_count([ConvLayer("p", 4)], (2, 8, 8)).total_macs == 512
    assert flops_count([ConvLayer("k", 4, kernel=3, padding=1)], (2, 8, 8)).total_macs == 4608


def test_three_layer_fixture_hand_sum():
    # (3,16,16) -> a: 8*3*9*8*8 -> b: 8*4*9*8*8 -> c: 5*8*1*8*8
    report = flops_count(FIXTURE, (3, 16, 16))
    assert [l.macs for l in report.layers] == [13824, 18432, 2560]
    assert report.total_macs == 34816
    assert report.total_flops == 2 * 34816
    assert report.total_params == 216 + 288 + 40 + 5
    assert report.layers[-1].out_shape == (5, 8, 8)


def test_grouped_scaling_law():
    for groups in (1, 2, 4):
        assert conv_macs(16, 32, 3, groups, 7, 5) == 2 * conv_macs(16, 32, 3, 2 * groups, 7, 5)


def test_additive_over_layers():
    whole = flops_count(FIXTURE, (3, 16, 16)).total_macs
    first = flops_count(FIXTURE[:1], (3, 16, 16)).total_macs
    rest = flops_count(FIXTURE[1:], (8, 8, 8)).total_macs
    assert whole == first + rest


def traced_counts(cfg, h=64, w=64):
    """Independent count: MACs of every conv recorded during a real forward pass."""
    model = SANet(cfg, seed=0)
    with Tape() as tape:
        model(Tensor(SeededRng(0).random((1, 3, h, w))))
    macs = sum(n.inputs[1].size * n.output.shape[2] * n.output.shape[3] for n in tape.nodes if n.op == "conv2d")
    params = sum(p.size for p in model.parameters().values())
    return macs, params


def test_default_config_matches_traced_forward():
    report = flops_count(ModelConfig(), (3, 64, 64))
    assert (report.total_macs, report.total_params) == traced_counts(ModelConfig())
    assert report.total_macs == 1390788608


def test_small_config_other_extents_matches_traced_forward():
    cfg = ModelConfig(stem_channels=8, stage_blocks=(1, 2, 1, 1), stage_channels=(8, 16, 16, 32), cardinality=2,
                      agg_channels=8, bins=((2, 2), (1, 1)), psp_reduce=4, gn_group_channels=4)
    report = flops_count(cfg, (48, 32))
    assert (report.total_macs, report.total_params) == traced_counts(cfg, 48, 32)


def test_config_serialization_order_does_not_matter():
    text = dump_config(RunConfig())
    shuffled = "\n".join(reversed(text.splitlines()))
    a = flops_count(parse_config(text).model)
    b = flops_count(parse_config(shuffled).model)
    assert a.total_macs == b.total_macs and a.total_params == b.total_params


def test_reports_render():
    report = flops_count(FIXTURE, (3, 16, 16))
    assert "FLOPs (2 per MAC)" in report.table()
    lines = report.to_csv().splitlines()
    assert lines[0] == "layer,kind,channels,height,width,macs,params"
    assert "total,,,,,34816,549" in lines
    assert report.peak_activation >= 3 * 16 * 16
