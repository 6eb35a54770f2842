import numpy as np
import pytest

from seqvessel.checkpoint import decode_int, encode_int, load_tensors, save_tensors
from seqvessel.data import make_windows
from seqvessel.network import NetworkConfig, ParameterStore, build
from seqvessel.rng import derive
from seqvessel.synth import SynthConfig, synthesize
from seqvessel.training import (TrainConfig, collect_metrics, evaluate,
                                history_csv, load_checkpoint, predict,
                                save_checkpoint, sgd_step, split_loss, train)

TINY_NET = NetworkConfig(stages=2, base_channels=2, window=4, input_hw=(16, 16),
                         dropout_rate=0.0)


def tiny_dataset(n_train=3, n_val=2, seed=0):
    cfg = SynthConfig(image_hw=(16, 16), sequence_len=4, vessel_count=(1, 2),
                      vessel_radius=(0.8, 1.4))
    def windows(count, tag):
        out = []
        for i in range(count):
            seq = synthesize(cfg, derive(seed, tag, i), id=f"{tag}{i}")
            out.extend(make_windows(seq, "train"))
        return out
    return {"train": windows(n_train, "tr"), "val": windows(n_val, "va")}


class TestSgdStep:
    def _store_with_grad(self, value, grad):
        store = ParameterStore()
        store.add("p", np.array([value], dtype=np.float32))
        store.get("p").grad[...] = grad
        store.grads_populated = True
        return store

    def test_plain_step(self):
        store = self._store_with_grad(0.0, 1.0)
        sgd_step(store, lr=0.1, momentum=0.0)
        assert store.value("p")[0] == pytest.approx(-0.1)

    def test_two_momentum_steps_hand_recursion(self):
        store = self._store_with_grad(0.0, 1.0)
        sgd_step(store, lr=1.0, momentum=0.9)
        assert store.value("p")[0] == pytest.approx(-1.0)
        store.get("p").grad[...] = 1.0
        store.grads_populated = True
        sgd_step(store, lr=1.0, momentum=0.9)
        assert store.value("p")[0] == pytest.approx(-2.9)

    def test_zero_grads_leave_parameters(self):
        store = self._store_with_grad(1.5, 0.0)
        sgd_step(store, lr=0.5, momentum=0.9)
        assert store.value("p")[0] == 1.5

    def test_unpopulated_grads_rejected(self):
        store = ParameterStore()
        store.add("p", np.zeros(1, dtype=np.float32))
        with pytest.raises(ValueError, match="gradients"):
            sgd_step(store, 0.1, 0.9)

    def test_grads_zeroed_after_step(self):
        store = self._store_with_grad(0.0, 2.0)
        sgd_step(store, 0.1, 0.9)
        assert np.all(store.get("p").grad == 0)
        assert not store.grads_populated


class TestTrainLoop:
    def test_lr_zero_freezes_parameters(self):
        ds = tiny_dataset()
        net, store = build(TINY_NET, seed=1)
        before = {n: store.value(n).copy() for n in store.names()}
        cfg = TrainConfig(lr=0.0, momentum=0.9, batch_size=2, epochs=1, seed=0,
                          augment=False)
        history, _ = train(net, store, ds, cfg)
        for name in store.names():
            assert np.array_equal(store.value(name), before[name]), name
        # evaluation of the frozen model is reproducible bit-for-bit
        assert split_loss(net, store, ds["val"], cfg) == history[0].val_loss

    def test_history_rows_and_csv(self):
        ds = tiny_dataset()
        net, store = build(TINY_NET, seed=2)
        cfg = TrainConfig(lr=0.01, batch_size=2, epochs=3, seed=3, augment=False)
        history, state = train(net, store, ds, cfg)
        assert [h.epoch for h in history] == [0, 1, 2]
        assert state == (3, 0)
        text = history_csv(history)
        assert text.splitlines()[0] == "epoch,train_loss,val_loss,val_DR,val_P,val_F"
        assert len(text.splitlines()) == 4

    def test_worker_count_does_not_change_history(self):
        ds = tiny_dataset()
        results = []
        for workers in (1, 4):
            net, store = build(TINY_NET, seed=5)
            cfg = TrainConfig(lr=0.01, batch_size=2, epochs=2, seed=7,
                              augment=True, workers=workers)
            history, _ = train(net, store, ds, cfg)
            results.append((history_csv(history),
                            {n: store.value(n).copy() for n in store.names()}))
        assert results[0][0] == results[1][0]
        for name in results[0][1]:
            assert np.array_equal(results[0][1][name], results[1][1][name]), name

    def test_same_seed_same_history(self):
        ds = tiny_dataset()
        runs = []
        for _ in range(2):
            net, store = build(TINY_NET, seed=4)
            cfg = TrainConfig(lr=0.01, batch_size=2, epochs=2, seed=9, augment=True)
            history, _ = train(net, store, ds, cfg)
            runs.append(history_csv(history))
        assert runs[0] == runs[1]

    def test_monotone_overfit_single_sample(self):
        ds = tiny_dataset(n_train=1, n_val=1)
        ds["train"] = ds["train"][:1]
        net, store = build(TINY_NET, seed=1)
        cfg = TrainConfig(lr=0.001, momentum=0.9, batch_size=1, epochs=50, seed=0,
                          loss="dice", augment=False)
        history, _ = train(net, store, ds, cfg)
        losses = [h.train_loss for h in history]
        assert all(b - a <= 1e-4 for a, b in zip(losses, losses[1:]))

    def test_empty_split_rejected(self):
        ds = tiny_dataset()
        net, store = build(TINY_NET, seed=0)
        with pytest.raises(ValueError, match="empty"):
            train(net, store, {"train": [], "val": ds["val"]}, TrainConfig(epochs=1))
        with pytest.raises(ValueError, match="empty"):
            train(net, store, {"train": ds["train"], "val": []}, TrainConfig(epochs=1))


class TestEvaluation:
    def test_perfect_oracle_predictions(self):
        ds = tiny_dataset(n_train=1, n_val=2)
        samples = [s for s in ds["val"] if s.mask.sum() > 0]
        probs = [s.mask.astype(np.float32) for s in samples]
        rows, agg = collect_metrics(samples, probs, threshold=0.5)
        for _, rec in rows:
            assert (rec.dr, rec.precision, rec.f) == (1.0, 1.0, 1.0)
            assert rec.gve_percent == 0.0
        assert agg["F"] == (1.0, 0.0)
        assert agg["GVE"] == (0.0, 0.0)

    def test_all_zero_predictions(self):
        ds = tiny_dataset(n_train=1, n_val=1)
        samples = [s for s in ds["val"] if s.mask.sum() > 0]
        probs = [np.zeros_like(s.mask) for s in samples]
        _, agg = collect_metrics(samples, probs, threshold=0.5)
        assert agg["DR"][0] == 0.0

    def test_aggregate_matches_hand_average_of_rows(self):
        ds = tiny_dataset(n_train=1, n_val=2)
        net, store = build(TINY_NET, seed=3)
        cfg = TrainConfig(lr=0.01, batch_size=2, epochs=1, seed=1, augment=False)
        train(net, store, ds, cfg)
        rows, agg = evaluate(net, store, ds["val"], cfg)
        fs = [rec.f for _, rec in rows]
        assert agg["F"][0] == pytest.approx(np.mean(fs))
        assert agg["F"][1] == pytest.approx(np.std(fs))

    def test_missing_masks_rejected(self):
        ds = tiny_dataset(n_train=1, n_val=1)
        net, store = build(TINY_NET, seed=3)
        cfg = TrainConfig(epochs=1, augment=False)
        bad = ds["val"][0]
        bad.mask = None
        with pytest.raises(ValueError, match="masks"):
            evaluate(net, store, [bad], cfg)

    def test_infer_batching_invariant(self):
        ds = tiny_dataset(n_train=2, n_val=2)
        net, store = build(TINY_NET, seed=6)
        cfg = TrainConfig(lr=0.01, batch_size=2, epochs=1, seed=2, augment=False)
        train(net, store, ds, cfg)
        one = predict(net, store, ds["val"], batch_size=1)
        four = predict(net, store, ds["val"], batch_size=4)
        for a, b in zip(one, four):
            assert np.array_equal(a, b)


class TestCheckpointFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a.weight": rng.standard_normal((3, 4)).astype(np.float32),
                   "b.bias": rng.standard_normal(7).astype(np.float32)}
        path = tmp_path / "t.ckpt"
        save_tensors(path, tensors)
        loaded = load_tensors(path)
        assert sorted(loaded) == sorted(tensors)
        for k in tensors:
            assert np.array_equal(loaded[k], tensors[k])

    def test_truncated_data_rejected(self, tmp_path):
        path = tmp_path / "t.ckpt"
        save_tensors(path, {"x": np.ones(5, dtype=np.float32)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(ValueError, match="truncated tensor data"):
            load_tensors(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "t.ckpt"
        save_tensors(path, {"x": np.ones(2, dtype=np.float32)})
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            load_tensors(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "t.ckpt"
        save_tensors(path, {"x": np.ones(2, dtype=np.float32)})
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ValueError, match="trailing"):
            load_tensors(path)

    def test_int_limb_encoding(self):
        for v in (0, 1, 65535, 65536, 123456789, 2 ** 63 - 1):
            assert decode_int(encode_int(v)) == v
        with pytest.raises(ValueError):
            encode_int(-1)


class TestCheckpointIntegration:
    def test_store_round_trip_including_momentum_and_buffers(self, tmp_path):
        ds = tiny_dataset()
        net, store = build(TINY_NET, seed=8)
        cfg = TrainConfig(lr=0.01, batch_size=2, epochs=1, seed=4, augment=False)
        train(net, store, ds, cfg)
        path = tmp_path / "run.ckpt"
        save_checkpoint(store, path, seed=4, state=(1, 0))
        _, fresh = build(TINY_NET, seed=123)
        seed, state = load_checkpoint(fresh, path)
        assert (seed, state) == (4, (1, 0))
        for name in store.names():
            assert np.array_equal(fresh.value(name), store.value(name)), name
            assert np.array_equal(fresh.get(name).momentum, store.get(name).momentum)
        for name in store.buffers:
            assert np.array_equal(fresh.buffers[name], store.buffers[name]), name

    def test_shape_mismatch_names_tensor(self, tmp_path):
        _, store = build(TINY_NET, seed=0)
        path = tmp_path / "x.ckpt"
        save_checkpoint(store, path)
        other = NetworkConfig(stages=2, base_channels=4, window=4, input_hw=(16, 16))
        _, victim = build(other, seed=0)
        before = {n: victim.value(n).copy() for n in victim.names()}
        with pytest.raises(ValueError, match=r"shape mismatch for '\S+'"):
            load_checkpoint(victim, path)
        # the failed load left the target store untouched
        for name in victim.names():
            assert np.array_equal(victim.value(name), before[name])

    def test_resume_matches_continuous_step_for_step(self, tmp_path):
        ds = tiny_dataset()
        cfg = TrainConfig(lr=0.01, momentum=0.9, batch_size=2, epochs=10, seed=11,
                          augment=True)

        # continuous: 5 optimizer steps
        net_a, store_a = build(TINY_NET, seed=2)
        train(net_a, store_a, ds, cfg, max_steps=5)

        # interrupted: 2 steps, checkpoint, restore into a fresh store, 3 more
        net_b, store_b = build(TINY_NET, seed=2)
        _, state = train(net_b, store_b, ds, cfg, max_steps=2)
        path = tmp_path / "mid.ckpt"
        save_checkpoint(store_b, path, seed=cfg.seed, state=state)
        net_c, store_c = build(TINY_NET, seed=999)
        _, state_c = load_checkpoint(store_c, path)
        train(net_c, store_c, ds, cfg, start=state_c, max_steps=3)

        for name in store_a.names():
            assert np.array_equal(store_a.value(name), store_c.value(name)), name
            assert np.array_equal(store_a.get(name).momentum, store_c.get(name).momentum)
        for name in store_a.buffers:
            assert np.array_equal(store_a.buffers[name], store_c.buffers[name]), name

    def test_epoch_boundary_resume_reproduces_history(self, tmp_path):
        ds = tiny_dataset()
        cfg = TrainConfig(lr=0.01, batch_size=2, epochs=4, seed=13, augment=True)
        net_a, store_a = build(TINY_NET, seed=3)
        hist_a, _ = train(net_a, store_a, ds, cfg)

        net_b, store_b = build(TINY_NET, seed=3)
        hist_b1, state = train(net_b, store_b, ds,
                               TrainConfig(lr=0.01, batch_size=2, epochs=2, seed=13,
                                           augment=True))
        path = tmp_path / "e2.ckpt"
        save_checkpoint(store_b, path, seed=13, state=state)
        net_c, store_c = build(TINY_NET, seed=3)
        _, state_c = load_checkpoint(store_c, path)
        hist_b2, _ = train(net_c, store_c, ds, cfg, start=state_c)

        assert history_csv(hist_a) == history_csv(hist_b1 + hist_b2)
