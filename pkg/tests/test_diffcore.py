import numpy as np
import pytest

from modelattrib import diffcore as dc
from modelattrib import losses
from modelattrib.hierarchy import AnchorSet, Taxonomy, compute_prototypes


def identity_head(dim):
    w = dc.Parameter(np.eye(dim), name="head.w0")
    b = dc.Parameter(np.zeros(dim), name="head.b0")
    return dc.ProjectionHead([(w, b)])


class TestForwardProject:
    def test_identity_one_layer(self):
        head = identity_head(2)
        f = np.array([3.0, -1.0])
        assert np.array_equal(head.project(f), f)

    def test_zero_input_zero_bias(self, rng):
        head = dc.ProjectionHead.seeded(4, 6, 3, rng)
        # tanh fixes 0, biases are zero at init
        assert np.array_equal(head.project(np.zeros(4)), np.zeros(3))

    def test_matches_scripted_oracle(self, rng):
        """Independent recomputation from the dumped weights, explicit loops."""
        head = dc.ProjectionHead.seeded(4, 5, 3, rng)
        f = np.zeros(4)
        f[0] = 1.0
        (w0, b0), (w1, b1) = head.layers

        hidden = [0.0] * 5
        for j in range(5):
            acc = b0.values[j]
            for i in range(4):
                acc += f[i] * w0.values[i, j]
            hidden[j] = np.tanh(acc)
        expected = [0.0] * 3
        for k in range(3):
            acc = b1.values[k]
            for j in range(5):
                acc += hidden[j] * w1.values[j, k]
            expected[k] = acc

        z = head.project(f)
        assert np.allclose(z, expected, rtol=0, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        head = dc.ProjectionHead.seeded(4, 5, 3, rng)
        with pytest.raises(ValueError):
            head.forward(np.zeros((2, 7)))


class TestForwardClassify:
    def test_zero_weights_uniform_softmax(self):
        clf = dc.LinearClassifier(3)
        clf.weight = dc.Parameter(np.zeros((4, 3)), name="clf.weight")
        clf.bias = dc.Parameter(np.zeros(4), name="clf.bias")
        logits = clf.logits(np.array([1.0, 2.0, 3.0]))
        assert np.array_equal(logits, np.zeros(4))
        p = dc.softmax(logits)
        assert np.allclose(p, 0.25)
        assert abs(p.sum() - 1.0) < 1e-6

    def test_unit_rows_argmax(self):
        clf = dc.LinearClassifier(3)
        clf.weight = dc.Parameter(np.eye(2, 3), name="clf.weight")
        clf.bias = dc.Parameter(np.zeros(2), name="clf.bias")
        logits = clf.logits(np.array([5.0, 0.0, 0.0]))
        assert int(np.argmax(logits)) == 0

    def test_matches_matmul_oracle(self, rng):
        head = dc.ProjectionHead.seeded(4, 5, 3, rng)
        clf = dc.LinearClassifier(3)
        clf.grow(2, rng)
        z = head.project(rng.normal(size=4))
        logits = clf.logits(z)
        expected = [
            sum(z[i] * clf.weight.values[c, i] for i in range(3)) + clf.bias.values[c]
            for c in range(2)
        ]
        assert np.allclose(logits, expected, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        clf = dc.LinearClassifier(3)
        clf.grow(2, rng)
        with pytest.raises(ValueError):
            clf.forward(np.zeros((1, 5)))

    def test_growth_preserves_old_logits(self, rng):
        clf = dc.LinearClassifier(4)
        clf.grow(3, rng)
        z = rng.normal(size=4)
        before = clf.logits(z)
        clf.grow(2, rng)
        after = clf.logits(z)
        assert np.array_equal(before, after[:3])
        assert clf.num_classes == 5


class TestBackward:
    def test_inner_product_grad_is_x(self, rng):
        w = dc.Parameter(rng.normal(size=(1, 4)), name="w")
        x = rng.normal(size=(4, 1))
        loss = dc.tsum(dc.matmul(dc.leaf(w), dc.Tensor(x)))
        loss.backward()
        assert np.allclose(w.grad, x.T, atol=1e-12)

    def test_squared_norm_grad_is_2w(self, rng):
        w = dc.Parameter(rng.normal(size=(1, 5)), name="w")
        lw = dc.leaf(w)
        loss = dc.tsum(dc.mul(lw, lw))
        loss.backward()
        assert np.allclose(w.grad, 2 * w.values, atol=1e-12)

    def test_backward_requires_scalar(self, rng):
        w = dc.Parameter(rng.normal(size=(2, 2)), name="w")
        with pytest.raises(RuntimeError):
            dc.leaf(w).backward()

    def test_grad_accumulates_until_zeroed(self, rng):
        w = dc.Parameter(rng.normal(size=(1, 3)), name="w")
        for _ in range(2):
            loss = dc.tsum(dc.leaf(w))
            loss.backward()
        assert np.allclose(w.grad, 2.0)
        w.zero_grad()
        assert np.all(w.grad == 0)

    def test_composite_matches_finite_differences(self, rng):
        """Full composite objective on a 3-class toy batch."""
        tax = Taxonomy()
        tax.register_classes(
            [("real", "real", "2022-01-01"), ("a", "f", "2022-02-01"), ("b", "f", "2022-03-01")]
        )
        tax.mark_real(0)
        head = dc.ProjectionHead.seeded(5, 4, 6, rng)
        clf = dc.LinearClassifier(6)
        clf.grow(3, rng)
        anchors = AnchorSet(6)
        anchors.grow(3, 2, rng)
        x = rng.normal(size=(9, 5))
        y = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2])
        ia, ib, betas = (np.array([0, 1, 2]), np.array([1, 2, 0]), np.array([0.3, 0.6, 0.9]))

        def build():
            z = head.forward(x)
            l_cls = losses.loss_cls(clf.forward(z), y)
            protos = compute_prototypes(z, y, tax)
            l1 = losses.loss_fine(protos, anchors)
            l2 = losses.loss_coarse(protos, anchors)
            z_mix = losses.mix_latent_pairs(z, ia, ib, betas)
            lu = losses.loss_unseen(clf.forward(z_mix), 0.65)
            l_rep = losses.loss_replay(x, y, head, clf)
            total, _ = losses.total_loss(l_cls, l1, l2, lu, l_rep, losses.LossWeights())
            return total

        params = head.parameters() + clf.parameters() + anchors.parameters()
        report = dc.grad_check(build, params, step=1e-4)
        assert report.max_rel_error <= 1e-3, report


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        p = dc.Parameter(np.array([[0.0]]), name="p")
        p.grad[...] = 1.0
        dc.adam_step([p], lr=0.1)
        assert abs(p.values[0, 0] - (-0.1)) < 1e-8
        assert p.step_count == 1
        assert np.all(p.grad == 0)

    def test_zero_grad_no_move(self):
        p = dc.Parameter(np.array([[1.5]]), name="p")
        dc.adam_step([p], lr=0.1)
        assert p.values[0, 0] == 1.5

    def test_quadratic_descent_matches_scripted_oracle(self):
        """10 steps on f(t) = t^2 from t=1, against an independent Adam loop."""
        p = dc.Parameter(np.array([[1.0]]), name="p")
        trajectory = []
        for _ in range(10):
            lp = dc.leaf(p)
            loss = dc.tsum(dc.mul(lp, lp))
            loss.backward()
            dc.adam_step([p], lr=0.05)
            trajectory.append(p.values[0, 0])

        theta, m, v = 1.0, 0.0, 0.0
        expected = []
        for t in range(1, 11):
            g = 2 * theta
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1 - 0.9**t)
            v_hat = v / (1 - 0.999**t)
            theta -= 0.05 * m_hat / (np.sqrt(v_hat) + 1e-8)
            expected.append(theta)

        assert np.allclose(trajectory, expected, atol=1e-12)
        values = [1.0] + trajectory
        f = [t * t for t in values]
        assert all(b < a for a, b in zip(f, f[1:]))


class TestGradCheck:
    def test_cls_loss_two_class_toy(self, rng):
        head = dc.ProjectionHead.seeded(3, 4, 2, rng)
        clf = dc.LinearClassifier(2)
        clf.grow(2, rng)
        x = rng.normal(size=(6, 3))
        y = np.array([0, 1, 0, 1, 0, 1])

        def build():
            return losses.loss_cls(clf.forward(head.forward(x)), y)

        report = dc.grad_check(build, head.parameters() + clf.parameters())
        assert report.max_rel_error <= 1e-3

    def test_fine_loss_two_anchors(self, rng):
        tax = Taxonomy()
        tax.register_classes([("a", "f1", "2022-01-01"), ("b", "f2", "2022-02-01")])
        head = dc.ProjectionHead.seeded(3, 4, 5, rng)
        anchors = AnchorSet(5)
        anchors.grow(2, 2, rng)
        x = rng.normal(size=(6, 3))
        y = np.array([0, 1, 0, 1, 0, 1])

        def build():
            protos = compute_prototypes(head.forward(x), y, tax)
            return losses.loss_fine(protos, anchors)

        report = dc.grad_check(build, head.parameters() + [anchors.fine])
        assert report.max_rel_error <= 1e-3

    def test_unseen_loss_off_kink(self, rng):
        head = dc.ProjectionHead.seeded(3, 4, 2, rng)
        clf = dc.LinearClassifier(2)
        clf.grow(2, rng)
        x = rng.normal(size=(4, 3))
        ia, ib = np.array([0, 1]), np.array([2, 3])
        betas = np.array([0.4, 0.7])
        tau = 0.65

        def build():
            z_mix = losses.mix_latent_pairs(head.forward(x), ia, ib, betas)
            return losses.loss_unseen(clf.forward(z_mix), tau)

        # the check only holds away from the hinge kink; verify the margin
        z_mix = losses.mix_latent_pairs(head.forward(x), ia, ib, betas)
        pmax = dc.softmax(clf.forward(z_mix).value).max(axis=1)
        assert np.all(np.abs(pmax - tau) > 1e-3), "instance sits on the hinge kink"

        report = dc.grad_check(build, head.parameters() + clf.parameters())
        assert report.max_rel_error <= 1e-3

    def test_non_finite_loss_raises(self, rng):
        p = dc.Parameter(np.ones((1, 1)), name="p")

        def build():
            return dc.Tensor(np.asarray(np.inf))

        with pytest.raises(FloatingPointError):
            dc.grad_check(build, [p])


class TestParameter:
    def test_grad_shape_tracks_values(self, rng):
        p = dc.Parameter(rng.normal(size=(2, 3)), name="p")
        assert p.grad.shape == p.values.shape
        p.grow_rows(rng.normal(size=(2, 3)))
        assert p.grad.shape == p.values.shape == (4, 3)
        assert np.all(p.adam_m[2:] == 0) and np.all(p.adam_v[2:] == 0)

    def test_grow_rows_width_mismatch(self, rng):
        p = dc.Parameter(rng.normal(size=(2, 3)), name="p")
        with pytest.raises(ValueError):
            p.grow_rows(rng.normal(size=(1, 4)))


def test_determinism_of_training_step(rng):
    """Same seed, same inputs: bit-identical parameters after several steps."""

    def run(seed):
        gen = np.random.default_rng(seed)
        head = dc.ProjectionHead.seeded(4, 5, 3, gen)
        clf = dc.LinearClassifier(3)
        clf.grow(2, gen)
        x = np.linspace(0, 1, 20).reshape(5, 4)
        y = np.array([0, 1, 0, 1, 0])
        for _ in range(5):
            loss = losses.loss_cls(clf.forward(head.forward(x)), y)
            for p in head.parameters() + clf.parameters():
                p.zero_grad()
            loss.backward()
            dc.adam_step(head.parameters() + clf.parameters())
        return [p.values.copy() for p in head.parameters() + clf.parameters()]

    a, b = run(42), run(42)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
