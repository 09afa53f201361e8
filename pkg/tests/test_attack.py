import numpy as np
import pytest

from silofl import attack, data, nn


class TestFiredNeurons:
    def test_basic(self):
        # neuron 0 weights (1, 0), neuron 1 weights (-1, 0); columns per neuron
        weights = np.array([[1.0, -1.0], [0.0, 0.0]])
        fired = attack.fired_neurons(weights, np.zeros(2), np.array([1.0, 0.0]))
        assert fired.tolist() == [0]

    def test_very_negative_bias_silences(self, rng):
        weights = rng.normal(size=(3, 4))
        fired = attack.fired_neurons(weights, np.full(4, -1e9), rng.normal(size=3))
        assert fired.size == 0

    def test_zero_boundary_strict(self):
        weights = np.eye(2)
        fired = attack.fired_neurons(weights, np.zeros(2), np.zeros(2))
        assert fired.size == 0


class TestReconstruct:
    def test_identity_relu_sum_loss(self):
        # victim layer y = relu(x W + b); loss = sum of outputs, batch of one
        net = nn.NetworkSpec((nn.Dense(2, 2), nn.Relu()))
        params = nn.ParamSet({"dense00": (np.eye(2), np.zeros(2))})
        x = np.array([[3.0, 1.0]])
        grads, _ = nn.backprop(net, params, x, np.ones((1, 2)))
        dW, db = grads["dense00"]
        np.testing.assert_array_equal(db, [1.0, 1.0])
        recovered = attack.reconstruct_from_fc_grads(dW, db, 0)
        np.testing.assert_array_equal(recovered, [3.0, 1.0])

    def test_random_victims_batch_one(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            net = nn.mlp((6, 8, 3))
            params = nn.init_params(net, rng)
            x = rng.random((1, 6))
            label = rng.integers(0, 3, size=1)
            dW, db = attack.first_layer_grads(net, params, x, label)
            fired = attack.fired_neurons(*params["dense00"], x[0])
            usable = [i for i in fired if abs(db[i]) > 1e-12]
            assert usable, "victim had no usable neuron"
            for i in usable[:3]:
                rec = attack.reconstruct_from_fc_grads(dW, db, i)
                rel = np.linalg.norm(rec - x[0]) / np.linalg.norm(x[0])
                assert rel <= 1e-6

    def test_dead_neuron_rejected(self):
        dW = np.zeros((2, 2))
        db = np.zeros(2)
        with pytest.raises(attack.DeadNeuronError):
            attack.reconstruct_from_fc_grads(dW, db, 1)

    def test_recover_all_filters(self):
        dW = np.array([[2.0, 0.0], [4.0, 0.0]])
        db = np.array([2.0, 0.0])
        result = attack.recover_all(dW, db)
        assert result.neurons.tolist() == [0]
        np.testing.assert_array_equal(result.samples, [[1.0, 2.0]])


class TestTrapWeights:
    def test_firing_rate_calibration(self):
        rng = np.random.default_rng(0)
        p = 0.875
        trap = attack.trap_weight_init(16, 32, data_mean=0.3, data_std=0.2, bias_percentile=p, rng=rng)
        xs = rng.normal(0.3, 0.2, size=(10_000, 16))
        pre = xs @ trap.weights + trap.biases
        rates = (pre > 0).mean(axis=0)
        assert np.all(np.abs(rates - (1 - p)) <= 0.05)

    def test_low_percentile_fires_everything(self):
        rng = np.random.default_rng(1)
        trap = attack.trap_weight_init(8, 16, 0.5, 0.1, bias_percentile=0.001, rng=rng)
        xs = rng.normal(0.5, 0.1, size=(500, 8))
        pre = xs @ trap.weights + trap.biases
        assert (pre > 0).mean() > 0.99

    def test_deterministic(self):
        a = attack.trap_weight_init(8, 4, 0.0, 1.0, 0.9, np.random.default_rng(5))
        b = attack.trap_weight_init(8, 4, 0.0, 1.0, 0.9, np.random.default_rng(5))
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.biases, b.biases)

    def test_rejects_bad_percentile(self):
        with pytest.raises(ValueError):
            attack.trap_weight_init(4, 2, 0.0, 1.0, 1.0, np.random.default_rng(0))

    def test_graft_replaces_first_layer(self, rng):
        net = nn.mlp((8, 16, 3))
        params = nn.init_params(net, rng)
        trap = attack.trap_weight_init(8, 16, 0.0, 1.0, 0.9, rng)
        grafted = trap.graft(params)
        np.testing.assert_array_equal(grafted["dense00"][0], trap.weights)
        np.testing.assert_array_equal(grafted["dense02"][0], params["dense02"][0])

    def test_trap_amplifies_exact_recovery(self):
        # aggregate over seeds: traps recover at least as many distinct samples
        mean, std, batch_size, n_neurons = 0.4, 0.25, 8, 64
        totals = {"trap": 0, "random": 0}
        for seed in range(8):
            rng = np.random.default_rng(seed)
            net = nn.mlp((12, n_neurons, 4))
            params = nn.init_params(net, rng)
            batch = rng.normal(mean, std, size=(batch_size, 12))
            labels = rng.integers(0, 4, size=batch_size)
            trap = attack.trap_weight_init(
                12, n_neurons, mean, std, 1.0 - 1.0 / batch_size, rng
            )
            for kind, victim in (("trap", trap.graft(params)), ("random", params)):
                dW, db = attack.first_layer_grads(net, victim, batch, labels)
                rec = attack.recover_all(dW, db)
                totals[kind] += len(attack.exact_recoveries(rec.samples, batch))
        assert totals["trap"] >= totals["random"]
        assert totals["trap"] > 0


class TestLeakage:
    def test_exact_synthetic_match(self):
        synth = np.array([[0.1, 0.2], [0.5, 0.5]])
        secret = np.array([[0.9, 0.9]])
        res = attack.ReconstructionResult(samples=synth[:1].copy(), neurons=np.array([3]))
        report = attack.evaluate_leakage(res, secret, synth, match_tol=1e-3)
        assert report.nn_distance_synthetic[0] == 0.0
        assert report.match_rate_synthetic == 1.0
        assert report.match_rate_secret == 0.0

    def test_empty_recovered(self):
        res = attack.recover_all(np.zeros((2, 3)), np.zeros(3))
        report = attack.evaluate_leakage(
            res, np.ones((2, 2)), np.zeros((2, 2)), match_tol=1e-3
        )
        assert report.match_rate_secret == 0.0 and report.match_rate_synthetic == 0.0

    def test_plain_victim_batch_one_full_secret_leak(self, rng):
        net = nn.mlp((4, 8, 2))
        params = nn.init_params(net, rng)
        secret = rng.random((6, 4))
        x = secret[2:3]
        dW, db = attack.first_layer_grads(net, params, x, np.array([1]))
        rec = attack.recover_all(dW, db)
        report = attack.evaluate_leakage(rec, secret, rng.random((5, 4)), match_tol=1e-3)
        assert report.match_rate_secret == 1.0

    def test_csv_layout(self, tmp_path, rng):
        res = attack.ReconstructionResult(
            samples=rng.random((2, 3)), neurons=np.array([1, 4])
        )
        report = attack.evaluate_leakage(
            res, rng.random((3, 3)), rng.random((3, 3)), match_tol=0.5
        )
        path = tmp_path / "leak.csv"
        attack.leakage_csv(report, path, residuals=np.array([0.1, 0.2]))
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "neuron,residual,nn_distance_secret,nn_distance_synthetic"
        assert len(lines) == 3
