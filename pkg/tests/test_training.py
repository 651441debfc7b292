import math

import numpy as np
import numpy.testing as npt
import pytest

from lthead import (ConfigError, DecoderConfig, DivergenceError, DomainError,
                    DataError, FeatureDataset, SyntheticSpec,
                    TextClassEmbeddings, TrainConfig, build_class_stats,
                    evaluate, generate_synthetic_lt, init_momentum,
                    load_checkpoint, lr_at, make_rng, metrics_from_predictions,
                    parse_run_config, render_run_config, save_checkpoint,
                    sgd_step, train_stage1, train_stage2, zero_shot_classify)
from lthead.training import report_json, render_report


def small_cfg(**kw):
    base = dict(seed=0, total_iters=30, batch_size=16, warmup_iters=5)
    base.update(kw)
    return TrainConfig(**base)


def tiny_problem(seed=0, num_classes=3, dim=8, balanced=True):
    spec = SyntheticSpec(num_classes=num_classes, head_count=30,
                         imbalance_ratio=1.0 if balanced else 10.0, dim=dim,
                         separation=2.0, noise=0.5, test_per_class=10, seed=seed)
    return generate_synthetic_lt(spec)


class TestLrSchedule:
    CFG = TrainConfig(seed=0)

    def test_warmup_end_hits_lr0(self):
        assert lr_at(self.CFG, 512) == pytest.approx(0.03, abs=1e-15)

    def test_cosine_midpoint(self):
        assert lr_at(self.CFG, 4352) == pytest.approx(0.015, abs=1e-15)

    def test_linear_warmup_midpoint(self):
        assert lr_at(self.CFG, 256) == pytest.approx(0.015, abs=1e-15)

    def test_continuity_at_junction(self):
        left = lr_at(self.CFG, 511)
        right = lr_at(self.CFG, 512)
        assert abs(right - left) < self.CFG.lr0 / 512 + 1e-12

    def test_final_iteration_near_zero(self):
        span = 8192 - 512
        bound = 0.03 * (math.pi / (2 * span)) ** 2 * 2
        assert 0 < lr_at(self.CFG, 8191) < bound

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            lr_at(self.CFG, 8192)
        with pytest.raises(DomainError):
            lr_at(self.CFG, -1)


class TestSgdStep:
    def test_plain_gradient_descent(self):
        params = {"w": np.array([1.0, 2.0])}
        grads = {"w": np.array([0.5, -1.0])}
        state = init_momentum(params, momentum=0.0)
        sgd_step(params, grads, state, lr=0.1, weight_decay=0.0)
        npt.assert_allclose(params["w"], [0.95, 2.1], rtol=0, atol=1e-15)

    def test_zero_grads_no_change(self):
        params = {"w": np.array([1.0, -3.0])}
        state = init_momentum(params, momentum=0.9)
        sgd_step(params, {"w": np.zeros(2)}, state, lr=0.1, weight_decay=0.0)
        npt.assert_array_equal(params["w"], [1.0, -3.0])

    def test_two_steps_match_scalar_recurrence_oracle(self):
        # f(x) = x^2 from x=1: grad 2x, momentum 0.9, wd 0.1, lr 0.05
        lr, mom, wd = 0.05, 0.9, 0.1
        x, v = 1.0, 0.0
        trace = []
        for _ in range(2):
            g = 2.0 * x + wd * x
            v = mom * v + g
            x = x - lr * v
            trace.append(x)

        params = {"x": np.array([1.0])}
        state = init_momentum(params, momentum=mom)
        for step in range(2):
            grads = {"x": 2.0 * params["x"].copy()}
            sgd_step(params, grads, state, lr=lr, weight_decay=wd)
            assert params["x"][0] == pytest.approx(trace[step], abs=1e-15)

    def test_shape_mismatch(self):
        params = {"w": np.zeros(3)}
        state = init_momentum(params, 0.9)
        from lthead import ShapeError
        with pytest.raises(ShapeError):
            sgd_step(params, {"w": np.zeros(4)}, state, 0.1, 0.0)


class TestRunConfig:
    def test_round_trip(self):
        cfg = TrainConfig(seed=3, loss="bsm", stage2_method="marc", depth=2)
        parsed = parse_run_config(render_run_config(cfg))
        assert parsed == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_run_config("learning_rate=0.1\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_run_config("total_iters=many\n")

    def test_comments_and_blanks(self):
        cfg = parse_run_config("# cfg\n\nseed=5\nloss=focal\n")
        assert cfg.seed == 5 and cfg.loss == "focal"

    def test_invalid_warmup(self):
        with pytest.raises(ConfigError):
            TrainConfig(total_iters=100, warmup_iters=100)


class TestTrainStage1:
    def test_zero_iterations_keeps_init(self):
        train, _ = tiny_problem()
        cfg = small_cfg(total_iters=0, warmup_iters=0)
        dc = DecoderConfig(dim=8, num_classes=3, depth=1, heads=2, dropout=0.0)
        from lthead import init_decoder
        head, log = train_stage1(train, cfg, dc, make_rng(cfg.seed))
        fresh = init_decoder(dc, make_rng(cfg.seed))
        for (_, a), (_, b) in zip(head.param_items(), fresh.param_items()):
            npt.assert_array_equal(a, b)
        assert log.size == 0

    def test_single_sample_memorization(self):
        ds = FeatureDataset(features=make_rng(0).standard_normal((1, 1, 6)),
                            labels=np.array([1]), num_classes=2, role="train")
        cfg = TrainConfig(seed=1, total_iters=200, batch_size=4,
                          warmup_iters=20, weight_decay=0.0)
        dc = DecoderConfig(dim=6, num_classes=2, depth=1, heads=2, dropout=0.0)
        with pytest.warns(UserWarning, match="zero training samples"):
            _, log = train_stage1(ds, cfg, dc, make_rng(cfg.seed))
        assert log[-1] < 1e-3

    def test_seed_determinism_bitwise(self):
        train, _ = tiny_problem(balanced=False)
        cfg = small_cfg(loss="bsm")
        dc = DecoderConfig(dim=8, num_classes=3, depth=2, heads=2, dropout=0.5)
        a, log_a = train_stage1(train, cfg, dc, make_rng(cfg.seed))
        b, log_b = train_stage1(train, cfg, dc, make_rng(cfg.seed))
        for (_, pa), (_, pb) in zip(a.param_items(), b.param_items()):
            npt.assert_array_equal(pa, pb)
        npt.assert_array_equal(log_a, log_b)

    def test_divergence_raises(self):
        train, _ = tiny_problem()
        cfg = small_cfg(lr0=1e30, weight_decay=0.0)
        dc = DecoderConfig(dim=8, num_classes=3, depth=1, heads=2, dropout=0.0)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError, match="iteration"):
                train_stage1(train, cfg, dc, make_rng(0))

    def test_loss_decreases_on_easy_problem(self):
        train, _ = tiny_problem()
        cfg = small_cfg(total_iters=150, warmup_iters=10)
        dc = DecoderConfig(dim=8, num_classes=3, depth=1, heads=2, dropout=0.0)
        _, log = train_stage1(train, cfg, dc, make_rng(2))
        assert np.mean(log[-10:]) < np.mean(log[:10])


class TestTrainStage2:
    @staticmethod
    def _trained_head(train, seed=0):
        cfg = small_cfg(seed=seed, total_iters=60, warmup_iters=8)
        dc = DecoderConfig(dim=8, num_classes=3, depth=1, heads=2, dropout=0.0)
        head, _ = train_stage1(train, cfg, dc, make_rng(cfg.seed))
        return head, cfg

    def test_zero_iterations_identity_metrics(self):
        train, test = tiny_problem()
        head, cfg = self._trained_head(train)
        stats = build_class_stats(train.labels, 3)
        base = evaluate(head, None, test, stats)
        for variant in ("lws", "disalign", "marc"):
            cal, log = train_stage2(head, train, small_cfg(stage2_iters=0),
                                    variant, make_rng(5))
            rep = evaluate(head, cal, test, stats)
            assert rep.overall == base.overall
            npt.assert_array_equal(rep.per_class_accuracy,
                                   base.per_class_accuracy)
            assert log.size == 0

    def test_lws_scales_stay_near_one_on_balanced_data(self):
        train, _ = tiny_problem()
        head, cfg = self._trained_head(train)
        cal, _ = train_stage2(head, train, small_cfg(stage2_iters=512),
                              "lws", make_rng(6))
        assert np.all(np.abs(cal.scales - 1.0) < 0.1)

    def test_stage2_seed_determinism(self):
        train, _ = tiny_problem(balanced=False)
        head, cfg = self._trained_head(train)
        a, _ = train_stage2(head, train, small_cfg(stage2_iters=40), "marc",
                            make_rng(7))
        b, _ = train_stage2(head, train, small_cfg(stage2_iters=40), "marc",
                            make_rng(7))
        npt.assert_array_equal(a.omega, b.omega)
        npt.assert_array_equal(a.beta, b.beta)

    def test_crt_trains_fresh_classifier(self):
        train, test = tiny_problem()
        head, cfg = self._trained_head(train)
        cal, _ = train_stage2(head, train, small_cfg(stage2_iters=200), "crt",
                              make_rng(8))
        stats = build_class_stats(train.labels, 3)
        rep = evaluate(head, cal, test, stats)
        assert rep.overall > 0.5  # the fresh classifier actually learned

    def test_unknown_variant(self):
        train, _ = tiny_problem()
        head, _ = self._trained_head(train)
        with pytest.raises(ConfigError):
            train_stage2(head, train, small_cfg(), "platt", make_rng(0))


class TestEvaluate:
    def test_all_correct(self):
        stats = build_class_stats(np.array([0, 0, 1, 1, 2]), 3)
        labels = np.array([0, 1, 2, 0, 1, 2])
        rep = metrics_from_predictions(labels, labels, stats)
        assert rep.overall == 1.0
        assert rep.precision == 1.0 and rep.recall == 1.0 and rep.f1 == 1.0

    def test_always_class_zero_analytic(self):
        # balanced binary test set, constant predictor
        stats = build_class_stats(np.array([0, 1]), 2)
        labels = np.array([0] * 10 + [1] * 10)
        preds = np.zeros(20, dtype=np.int64)
        rep = metrics_from_predictions(preds, labels, stats)
        assert rep.overall == pytest.approx(0.5, abs=1e-15)
        assert rep.f1 == pytest.approx((2 / 3 + 0.0) / 2, abs=1e-15)
        assert rep.precision == pytest.approx(0.25, abs=1e-15)
        assert rep.recall == pytest.approx(0.5, abs=1e-15)

    def test_matches_confusion_matrix_oracle_exactly(self):
        rng = make_rng(9)
        k = 6
        stats = build_class_stats(np.concatenate(
            [np.arange(k), rng.integers(0, k, 400)]), k)
        labels = rng.integers(0, k, size=1000)
        preds = rng.integers(0, k, size=1000)
        rep = metrics_from_predictions(preds, labels, stats)

        # brute-force oracle: dict-of-dicts confusion matrix and loops
        confusion = [[0] * k for _ in range(k)]
        for y, p in zip(labels, preds):
            confusion[y][p] += 1
        per_prec, per_rec, per_f1 = [], [], []
        for j in range(k):
            support = sum(confusion[j])
            predicted = sum(confusion[i][j] for i in range(k))
            tp = confusion[j][j]
            rec = tp / support
            prec = tp / predicted if predicted else 0.0
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
            per_prec.append(prec)
            per_rec.append(rec)
            per_f1.append(f1)
        overall = sum(confusion[j][j] for j in range(k)) / 1000

        assert rep.overall == overall
        assert rep.precision == sum(per_prec) / k
        assert rep.recall == sum(per_rec) / k
        assert rep.f1 == sum(per_f1) / k
        npt.assert_array_equal(rep.per_class_accuracy, per_rec)

    def test_macro_recall_equals_overall_on_balanced_test(self):
        rng = make_rng(10)
        k = 7
        stats = build_class_stats(np.concatenate(
            [np.arange(k), rng.integers(0, k, 300)]), k)
        labels = np.repeat(np.arange(k), 40)
        preds = rng.integers(0, k, size=labels.size)
        rep = metrics_from_predictions(preds, labels, stats)
        assert abs(rep.recall - rep.overall) < 1e-12

    def test_group_accuracies_average_member_classes(self):
        stats = build_class_stats(
            np.repeat(np.arange(3), [150, 50, 5]), 3)  # many, medium, few
        labels = np.repeat(np.arange(3), 4)
        preds = labels.copy()
        preds[0] = 1  # one mistake in the many class
        rep = metrics_from_predictions(preds, labels, stats)
        assert rep.many == pytest.approx(0.75, abs=1e-15)
        assert rep.medium == 1.0 and rep.few == 1.0

    def test_empty_test_class_warns_and_excluded(self):
        stats = build_class_stats(np.array([0, 0, 1, 1, 2, 2]), 3)
        labels = np.array([0, 0, 1, 1])  # class 2 missing
        preds = np.array([0, 0, 1, 0])
        with pytest.warns(UserWarning, match="no test samples"):
            rep = metrics_from_predictions(preds, labels, stats)
        assert math.isnan(rep.per_class_accuracy[2])
        assert rep.recall == pytest.approx((1.0 + 0.5) / 2, abs=1e-15)

    def test_rates_within_unit_interval(self):
        rng = make_rng(11)
        stats = build_class_stats(np.concatenate(
            [np.arange(4), rng.integers(0, 4, 100)]), 4)
        labels = rng.integers(0, 4, 200)
        preds = rng.integers(0, 4, 200)
        rep = metrics_from_predictions(preds, labels, stats)
        for value in (rep.overall, rep.many, rep.medium, rep.few,
                      rep.precision, rep.recall, rep.f1):
            if not math.isnan(value):
                assert 0.0 <= value <= 1.0

    def test_argmax_invariant_to_monotone_logit_transforms(self):
        rng = make_rng(12)
        logits = rng.standard_normal((50, 4))
        base = np.argmax(logits, axis=1)
        npt.assert_array_equal(np.argmax(3.0 * logits + 1.0, axis=1), base)
        npt.assert_array_equal(np.argmax(np.tanh(logits), axis=1), base)
        stats = build_class_stats(np.concatenate(
            [np.arange(4), rng.integers(0, 4, 60)]), 4)
        labels = rng.integers(0, 4, 50)
        a = metrics_from_predictions(np.argmax(logits, axis=1), labels, stats)
        b = metrics_from_predictions(np.argmax(np.tanh(logits), axis=1),
                                     labels, stats)
        assert report_json(a) == report_json(b)

    def test_unbalanced_test_set_warns(self):
        train, _ = tiny_problem()
        cfg = small_cfg(total_iters=5, warmup_iters=1)
        dc = DecoderConfig(dim=8, num_classes=3, depth=0, heads=1, dropout=0.0)
        head, _ = train_stage1(train, cfg, dc, make_rng(0))
        stats = build_class_stats(train.labels, 3)
        lopsided = FeatureDataset(
            features=make_rng(1).standard_normal((5, 1, 8)),
            labels=np.array([0, 0, 0, 1, 2]), num_classes=3, role="test")
        with pytest.warns(UserWarning, match="not class-balanced"):
            evaluate(head, None, lopsided, stats)

    def test_report_render_and_json(self):
        stats = build_class_stats(np.array([0, 1]), 2)
        rep = metrics_from_predictions(np.array([0, 1]), np.array([0, 1]), stats)
        text = render_report(rep)
        assert "overall" in text and "1.000000" in text
        assert '"overall": 1.0' in report_json(rep)


class TestCheckpointRoundTrip:
    def test_bit_exact_and_eval_identical(self, tmp_path):
        train, test = tiny_problem(balanced=False)
        cfg = small_cfg(total_iters=40, warmup_iters=5, loss="bsm")
        dc = DecoderConfig(dim=8, num_classes=3, depth=2, heads=2, dropout=0.5)
        head, _ = train_stage1(train, cfg, dc, make_rng(cfg.seed))
        cal, _ = train_stage2(head, train, small_cfg(stage2_iters=30), "disalign",
                              make_rng(3))
        stats = build_class_stats(train.labels, 3)
        before = evaluate(head, cal, test, stats)

        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, head, stats.counts, calibrator=cal)
        head2, stats2, cal2 = load_checkpoint(path)
        for (_, a), (_, b) in zip(head.param_items(), head2.param_items()):
            npt.assert_array_equal(a, b)
        npt.assert_array_equal(stats.counts, stats2.counts)
        for name, arr in cal.param_dict().items():
            npt.assert_array_equal(arr, cal2.param_dict()[name])

        after = evaluate(head2, cal2, test, stats2)
        assert report_json(before) == report_json(after)  # bit-identical report
        path2 = tmp_path / "ckpt2.bin"
        save_checkpoint(path2, head2, stats2.counts, calibrator=cal2)
        assert path.read_bytes() == path2.read_bytes()

    def test_no_calibrator_round_trip(self, tmp_path):
        train, _ = tiny_problem()
        cfg = small_cfg(total_iters=5, warmup_iters=1)
        dc = DecoderConfig(dim=8, num_classes=3, depth=0, heads=1, dropout=0.0)
        head, _ = train_stage1(train, cfg, dc, make_rng(0))
        path = tmp_path / "h.bin"
        save_checkpoint(path, head, np.array([10, 10, 10]))
        head2, stats2, cal2 = load_checkpoint(path)
        assert cal2 is None
        npt.assert_array_equal(head.cls_weight, head2.cls_weight)


class TestZeroShot:
    def test_identical_class_embeddings_uniform(self):
        k, d = 4, 6
        emb = TextClassEmbeddings.from_matrix(np.tile(make_rng(0).standard_normal(d),
                                                      (k, 1)))
        _, probs = zero_shot_classify(make_rng(1).standard_normal((3, d)), emb)
        npt.assert_allclose(probs, 1.0 / k, rtol=0, atol=1e-12)

    def test_orthonormal_analytic(self):
        emb = TextClassEmbeddings.from_matrix(np.eye(3))
        preds, probs = zero_shot_classify(np.eye(3)[:1], emb)
        expected = math.e / (math.e + 2)
        assert probs[0, 0] == pytest.approx(expected, abs=1e-12)
        assert preds[0] == 0

    def test_matches_direct_formula_oracle(self):
        rng = make_rng(2)
        k, d, n = 5, 7, 20
        class_mat = rng.standard_normal((k, d))
        images = rng.standard_normal((n, d))
        emb = TextClassEmbeddings.from_matrix(class_mat)
        _, probs = zero_shot_classify(images, emb, temperature=1.0)

        for i in range(n):
            cos = np.empty(k)
            for j in range(k):
                tj = class_mat[j] / np.linalg.norm(class_mat[j])
                im = images[i] / np.linalg.norm(images[i])
                cos[j] = float(np.dot(tj, im))
            expected = np.exp(cos) / np.sum(np.exp(cos))
            npt.assert_allclose(probs[i], expected, rtol=0, atol=1e-12)

    def test_image_rescale_invariance(self):
        rng = make_rng(3)
        emb = TextClassEmbeddings.from_matrix(rng.standard_normal((4, 5)))
        images = rng.standard_normal((6, 5))
        _, p1 = zero_shot_classify(images, emb)
        _, p2 = zero_shot_classify(images * 37.5, emb)
        npt.assert_allclose(p1, p2, rtol=0, atol=1e-12)

    def test_zero_norm_image_rejected(self):
        emb = TextClassEmbeddings.from_matrix(np.eye(3))
        with pytest.raises(DataError):
            zero_shot_classify(np.zeros((1, 3)), emb)

    def test_unit_norm_rows(self):
        emb = TextClassEmbeddings.from_matrix(make_rng(4).standard_normal((6, 9)))
        norms = np.linalg.norm(emb.matrix, axis=1)
        npt.assert_allclose(norms, 1.0, rtol=0, atol=1e-9)

    def test_temperature_sharpens(self):
        rng = make_rng(5)
        emb = TextClassEmbeddings.from_matrix(rng.standard_normal((3, 4)))
        images = rng.standard_normal((5, 4))
        _, p_hot = zero_shot_classify(images, emb, temperature=0.05)
        _, p_base = zero_shot_classify(images, emb, temperature=1.0)
        assert p_hot.max(axis=1).min() >= p_base.max(axis=1).min()
        with pytest.raises(DomainError):
            zero_shot_classify(images, emb, temperature=0.0)
