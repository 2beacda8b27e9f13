import csv
import json

import numpy as np
import pytest

from hoyersparse import metrics
from hoyersparse.model import RELU, Dense, Network, build_network


def zero_net(arch):
    net = build_network(arch)
    net.set_masks([None if m is None else np.zeros_like(m) for m in net.masks])
    return net


def test_count_nonzero_fresh_lenet300():
    counts = metrics.count_nonzero(build_network("lenet300100"))
    assert counts == {"fc1": 235200, "fc2": 30000, "fc3": 1000, "total": 266200}


def test_count_nonzero_all_zero():
    assert metrics.count_nonzero(zero_net("lenet5"))["total"] == 0


def test_unpruned_structures():
    assert metrics.surviving_structure(build_network("lenet300100")) == [784, 300, 100]
    assert metrics.surviving_structure(build_network("lenet5")) == [20, 50, 800, 500]


def test_zero_input_column_is_not_counted():
    net = Network([Dense(3, 2), RELU, Dense(2, 4)], (3,))
    net.weights[0][:, 1] = 0
    assert metrics.surviving_structure(net)[0] == 2


def test_unit_without_consumers_is_dead():
    net = build_network("lenet300100")
    net.weights[2][:, :7] = 0  # fc2 ignores seven fc1 outputs
    assert metrics.surviving_structure(net) == [784, 293, 100]


def test_dead_conv_channel_removes_flattened_inputs():
    net = build_network("lenet5")
    net.weights[3][4] = 0  # conv2 filter 4
    # its 16 flattened positions no longer feed fc1
    assert metrics.surviving_structure(net) == [20, 49, 784, 500]


@pytest.mark.parametrize("structure,arch,expected", [
    ("784-300-100", "lenet300100", 266200),
    ("512-114-72", "lenet300100", 67296),
    ("278-98-13", "lenet300100", 28648),
    ("353-45-11", "lenet300100", 16490),
    ("20-50-800-500", "lenet5", 2293000),
    ("5-12-139-13", "lenet5", 169937),
])
def test_flops_reference_structures(structure, arch, expected):
    assert metrics.flops([int(s) for s in structure.split("-")], arch) == expected


def test_flops_of_unpruned_nets_match_parameter_arithmetic():
    net = build_network("lenet300100")
    assert metrics.flops(metrics.surviving_structure(net), net) == 784 * 300 + 300 * 100 + 100 * 10
    net = build_network("lenet5")
    conv = 24 * 24 * 25 * 1 * 20 + 8 * 8 * 25 * 20 * 50
    assert metrics.flops(metrics.surviving_structure(net), net) == conv + 800 * 500 + 500 * 10


def test_flops_validation():
    with pytest.raises(ValueError):
        metrics.flops([784, 300], "lenet300100")
    with pytest.raises(ValueError):
        metrics.flops([785, 300, 100], "lenet300100")


def test_structure_is_monotone_under_group_masking():
    rng = np.random.default_rng(0)
    net = build_network("lenet5")
    prev = metrics.surviving_structure(net)
    for _ in range(10):
        i = net.param_layers[rng.integers(4)]
        masks = [None if m is None else m.copy() for m in net.masks]
        if rng.uniform() < 0.5:
            masks[i][rng.integers(masks[i].shape[0])] = 0
        else:
            masks[i][:, rng.integers(masks[i].shape[1])] = 0
        net.set_masks(masks)
        cur = metrics.surviving_structure(net)
        assert all(c <= p for c, p in zip(cur, prev))
        prev = cur


def test_histogram_examples():
    net = Network([Dense(2, 1)], (2,))
    net.weights[0][...] = [[-1.0, 1.0]]
    edges, counts = metrics.weight_histogram(net, 0, bins=2, range=(-1, 1))
    assert edges.tolist() == [-1.0, 0.0, 1.0] and counts.tolist() == [1, 1]
    net.weights[0][...] = 0
    _, counts = metrics.weight_histogram(net, 0, bins=5)
    assert not counts.any()


def test_histogram_conserves_nonzero_count():
    net = build_network("lenet300100")
    net.weights[0][::3] = 0
    _, counts = metrics.weight_histogram(net, 0, bins=50)
    assert counts.sum() == np.count_nonzero(net.weights[0])


def test_histogram_csv(tmp_path):
    path = tmp_path / "h.csv"
    metrics.write_histogram_csv(np.array([0.0, 0.5, 1.0]), np.array([2, 3]), path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows == [["bin_left", "bin_right", "count"], ["0.0", "0.5", "2"], ["0.5", "1.0", "3"]]


def test_sparsity_report(tmp_path):
    net = build_network("lenet300100")
    net.weights[2][:, :7] = 0
    report = metrics.sparsity_report(net, test_acc=0.9)
    assert report.structure == [784, 293, 100]
    assert report.flops == 784 * 293 + 293 * 100 + 100 * 10
    assert report.flops_full == 266200
    assert report.total_nonzero == 266200 - 700
    path = tmp_path / "r.json"
    report.save(path)
    doc = json.loads(path.read_text())
    assert doc["structure_str"] == "784-293-100" and doc["accuracy"] == {"test_acc": 0.9}
    assert [entry["name"] for entry in doc["layers"]] == ["fc1", "fc2", "fc3"]
