import csv

import numpy as np
import pytest

from hoyersparse import optim
from hoyersparse import regularizers as reg
from hoyersparse.data import synthetic_blobs
from hoyersparse.model import Dense, Network, backward, build_network, group_view
from hoyersparse.model import RELU

from conftest import rel_err


def away_from_zero(net, rng, low=1e-2):
    for i in net.param_layers:
        w = net.weights[i]
        small = np.abs(w) < low
        w[small] = np.copysign(low + rng.uniform(0, low, small.sum()), w[small])


# --- optimizers ------------------------------------------------------------

def test_sgd_examples():
    w = np.array([1.0])
    optim.SGD(lr=1.0).step([w], [np.array([0.25])])
    assert w[0] == 0.75
    w = np.array([2.0, -3.0])
    optim.SGD(lr=0.1).step([w], [np.zeros(2)])
    assert w.tolist() == [2.0, -3.0]


def test_sgd_momentum_accumulates():
    w = np.array([0.0])
    opt = optim.SGD(lr=0.1, momentum=0.9)
    opt.step([w], [np.array([1.0])])
    opt.step([w], [np.array([1.0])])
    # v1 = 1, v2 = 0.9 + 1
    assert w[0] == pytest.approx(-0.1 - 0.19, rel=1e-15)


def test_adam_first_step_closed_form():
    g = np.array([0.5, -2.0, 1e-3])
    w = np.zeros(3)
    optim.Adam(lr=1e-3).step([w], [g])
    # bias-corrected moments are g and g^2 after one step
    assert np.allclose(w, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12, atol=0)


def test_adam_second_step_closed_form():
    g1, g2 = np.array([1.0]), np.array([-0.5])
    w = np.zeros(1)
    opt = optim.Adam(lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
    opt.step([w], [g1])
    opt.step([w], [g2])
    m = 0.9 * 0.1 * 1.0 + 0.1 * -0.5
    v = 0.999 * 0.001 * 1.0 + 0.001 * 0.25
    first = -0.01 * 1.0 / (1.0 + 1e-8)
    second = -0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert w[0] == pytest.approx(first + second, rel=1e-12)


def test_optimizer_shape_checks():
    with pytest.raises(ValueError):
        optim.SGD().step([np.zeros(2)], [np.zeros(3)])
    with pytest.raises(ValueError):
        optim.Adam().step([np.zeros(2)], [])
    with pytest.raises(ValueError):
        optim.make_optimizer("rmsprop")


# --- composite objectives --------------------------------------------------

def test_zero_decay_equals_backward(rng):
    net = build_network("lenet300100")
    x, y = rng.standard_normal((5, 784)), rng.integers(0, 10, 5)
    _, wg, bg = backward(net, x, y)
    objective = optim.ObjectiveSpec([optim.PenaltyTerm(reg.RegularizerSpec("hoyer_square", 0.0)),
                                     optim.PenaltyTerm(reg.RegularizerSpec("l2", 0.0))])
    cg = optim.composite_gradient(net, x, y, objective)
    for i in net.param_layers:
        assert np.array_equal(cg.weight_grads[i], wg[i])
        assert np.array_equal(cg.bias_grads[i], bg[i])


def test_empty_batch_gives_pure_regularizer_gradient():
    net = build_network("lenet300100")
    objective = optim.elementwise_objective("hoyer_square", alpha=1.0)
    cg = optim.composite_gradient(net, np.zeros((0, 784)), np.zeros(0, dtype=int), objective)
    spec = reg.RegularizerSpec("hoyer_square", 1.0)
    for i in net.param_layers:
        assert np.array_equal(cg.weight_grads[i], reg.gradient(spec, net.weights[i]))
    assert cg.data_loss == 0.0


def test_structural_objective_value_is_sum_of_parts(rng):
    net = Network([Dense(6, 4), RELU, Dense(4, 3)], (6,))
    alpha, beta = 0.3, 0.05
    objective = optim.structural_objective(alpha, alpha, beta)
    total = sum(optim.penalty_values(net, objective).values())
    expected = 0.0
    for i in net.param_layers:
        w = net.weights[i]
        row_norms = np.linalg.norm(w, axis=1)
        col_norms = np.linalg.norm(w, axis=0)
        expected += alpha * (row_norms.sum() ** 2 / (row_norms**2).sum())
        expected += alpha * (col_norms.sum() ** 2 / (col_norms**2).sum())
        expected += beta * np.linalg.norm(w)
    assert total == pytest.approx(expected, rel=1e-12)


def test_penalty_names():
    assert optim.structural_objective(1, 1, 1).names == ["group_hs[filter_wise]", "group_hs[channel_wise]", "l2"]
    assert optim.elementwise_objective("hoyer", 1).names == ["hoyer"]
    assert optim.elementwise_objective("hoyer", 0, 0).names == []


def test_regularizer_gradient_is_masked(rng):
    net = build_network("lenet300100")
    masks = list(net.masks)
    masks[0] = masks[0].copy()
    masks[0][:, :10] = 0
    net.set_masks(masks)
    cg = optim.composite_gradient(net, rng.standard_normal((2, 784)), np.array([0, 1]),
                                  optim.elementwise_objective("hoyer_square", 1.0, 1.0))
    assert not cg.weight_grads[0][:, :10].any()


def test_layer_restricted_term(rng):
    net = build_network("lenet300100")
    term = optim.PenaltyTerm(reg.RegularizerSpec("l1", 1.0), layers=[2])
    objective = optim.ObjectiveSpec([term])
    assert optim.penalty_values(net, objective)["l1"] == pytest.approx(np.abs(net.weights[2]).sum())
    with pytest.raises(ValueError):
        optim.ObjectiveSpec([optim.PenaltyTerm(reg.RegularizerSpec("l1", 1.0), layers=[1])]).validate(net)


@pytest.mark.parametrize("arch,objective", [
    ("lenet300100", optim.elementwise_objective("hoyer_square", 1e-3, 1e-3)),
    ("lenet300100", optim.structural_objective(2e-3, 2e-3, 1e-3)),
    ("lenet5", optim.elementwise_objective("hoyer", 1e-2, 1e-3)),
])
def test_directional_derivative(arch, objective):
    rng = np.random.default_rng(21)
    net = build_network(arch, seed=2)
    away_from_zero(net, rng)
    ds = synthetic_blobs(8, 10, seed=4)
    cg = optim.composite_gradient(net, ds.images, ds.labels, objective)
    dirs = {i: rng.standard_normal(net.weights[i].shape) for i in net.param_layers}
    analytic = sum(np.sum(cg.weight_grads[i] * d) for i, d in dirs.items())
    h = 1e-6
    base = {i: net.weights[i].copy() for i in net.param_layers}

    def f(sign):
        for i, d in dirs.items():
            net.weights[i][...] = base[i] + sign * h * d
        return optim.objective_value(net, ds.images, ds.labels, objective)

    numeric = (f(1) - f(-1)) / (2 * h)
    assert rel_err(analytic, numeric) <= 1e-5


# --- training loop ---------------------------------------------------------

def small_problem():
    ds = synthetic_blobs(300, 10, seed=1)
    return ds.subset(np.arange(200)), ds.subset(np.arange(200, 300))


def test_zero_epochs_leave_net_unchanged():
    train, _ = small_problem()
    net = build_network("lenet300100")
    before = [w.copy() for w in net.weights if w is not None]
    log = optim.train_epochs(net, train, optim.ObjectiveSpec(), optim.Adam(), 0)
    assert log == []
    assert all(np.array_equal(a, b) for a, b in zip(before, [w for w in net.weights if w is not None]))


def test_same_seed_same_log_and_weights():
    train, test = small_problem()
    runs = []
    for _ in range(2):
        net = build_network("lenet300100", seed=0)
        log = optim.train_epochs(net, train, optim.elementwise_objective("hoyer_square", 1e-3), optim.Adam(), 2,
                                 seed=5, test=test, batch_size=32)
        runs.append((log, net))
    assert runs[0][0] == runs[1][0]
    for i in runs[0][1].param_layers:
        assert np.array_equal(runs[0][1].weights[i], runs[1][1].weights[i])


def test_epochs_are_prefix_consistent():
    train, test = small_problem()
    short = build_network("lenet300100")
    long = build_network("lenet300100")
    log_short = optim.train_epochs(short, train, optim.ObjectiveSpec(), optim.Adam(), 1, seed=2, test=test)
    log_long = optim.train_epochs(long, train, optim.ObjectiveSpec(), optim.Adam(), 2, seed=2, test=test)
    assert log_long[0] == log_short[0]


def test_training_respects_masks():
    train, _ = small_problem()
    net = build_network("lenet300100")
    masks = [None if m is None else m.copy() for m in net.masks]
    masks[0][::2] = 0
    net.set_masks(masks)
    optim.train_epochs(net, train, optim.elementwise_objective("hoyer_square", 1e-3), optim.Adam(), 1)
    assert not net.weights[0][::2].any()


def test_log_columns_and_csv(tmp_path):
    train, test = small_problem()
    net = build_network("lenet300100")
    log = optim.train_epochs(net, train, optim.structural_objective(1e-3, 1e-3, 1e-4), optim.Adam(), 1,
                             test=test)
    path = tmp_path / "log.csv"
    optim.write_log_csv(log, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "data_loss", "group_hs[filter_wise]", "group_hs[channel_wise]", "l2",
                       "train_acc", "test_acc", "nonzero_fraction"]
    assert float(rows[1][1]) == log[0]["data_loss"]


def test_empty_training_set_rejected():
    ds = synthetic_blobs(5, 10)
    with pytest.raises(ValueError):
        optim.train_epochs(build_network("lenet300100"), ds.subset(np.arange(0)), optim.ObjectiveSpec(),
                           optim.Adam(), 1)


def test_separated_blobs_fit_quickly():
    ds = synthetic_blobs(400, 2, seed=0, separation=20.0)
    net = build_network("lenet300100")
    log = optim.train_epochs(net, ds, optim.ObjectiveSpec(), optim.Adam(), 5, batch_size=32)
    assert optim.accuracy(net, ds.images, ds.labels) == 1.0
    assert log[-1]["train_acc"] == 1.0


@pytest.mark.slow
def test_mnist_plain_training_ten_epochs(lenet300_pretrained):
    _, log = lenet300_pretrained
    assert log[9]["epoch"] == 10
    assert log[9]["test_acc"] >= 0.975
