import math

import numpy as np
import pytest
import torch

from pmt.core import DomainId, TrainConfig, make_rng
from pmt.data import DomainSpec, DomainStyle, generate_domain
from pmt.protobank import PrototypeBank
from pmt.trainer import (ABLATIONS, BatchStream, MetricsLog, TrainingError, adapt, adapt_step, apply_ablation,
                         burn_in, burn_in_step, init_state, params_checksum, prepare_source_batch,
                         prepare_target_batch, run_experiment)

STYLE = DomainStyle(((0.8, 0.8, 0.75), (0.9, 0.9, 0.85), (0.7, 0.75, 0.8)),
                    ((0.85, 0.15, 0.1), (0.15, 0.65, 0.15), (0.15, 0.25, 0.85)), noise_sigma=0.02)
SMALL = dict(feature_channels=8, head_hidden=8, proto_hidden=8, disc_hidden=8, proto_dim=4, batch_size=2,
             burn_in_epochs=1, adapt_epochs=1, ema_momentum=0.9, pseudo_label_threshold=0.3)


def domains(n=4, size=32):
    mk = lambda j, labeled, seed: generate_domain(
        DomainSpec(DomainId(j), STYLE, n, image_size=size, object_size=(8, 14), objects_per_image=(1, 2),
                   labeled=labeled), make_rng(seed))
    return [mk(0, True, 1), mk(1, True, 2)], mk(2, False, 3), mk(2, True, 4)


@pytest.fixture(scope="module")
def data():
    return domains()


def batches(state, sources, target):
    rng = state.rngs["augment"]
    src = [prepare_source_batch(ds, [0, 1], rng) for ds in sources]
    return src, prepare_target_batch(target, [0, 1], rng)


def adapted_state(config, sources):
    state = burn_in(sources, config.replace(burn_in_epochs=0))
    return state


def test_ablation_matrix():
    cfg = TrainConfig()
    assert apply_ablation(cfg, "mt_only").beta == 0 and apply_ablation(cfg, "mt_only").gamma == 0
    assert apply_ablation(cfg, "no_disc").beta == 0 and apply_ablation(cfg, "no_disc").gamma == cfg.gamma
    assert not apply_ablation(cfg, "no_sep").use_separation and apply_ablation(cfg, "no_sep").use_alignment
    assert not apply_ablation(cfg, "no_align").use_alignment
    assert apply_ablation(cfg, "disc_only").gamma == 0 and apply_ablation(cfg, "disc_only").beta == cfg.beta
    assert apply_ablation(cfg, "source_only").adapt_epochs == 0
    assert apply_ablation(cfg, "none") == cfg
    for ab in ABLATIONS:
        changed = apply_ablation(cfg, ab)
        assert (changed.batch_size, changed.learning_rate, changed.seed) == (cfg.batch_size, cfg.learning_rate, cfg.seed)
    with pytest.raises(ValueError):
        apply_ablation(cfg, "bogus")


def test_zero_burn_in_copies_student(data):
    sources, _, _ = data
    cfg = TrainConfig(**SMALL).replace(burn_in_epochs=0)
    fresh = init_state(cfg)
    state = burn_in(sources, cfg)
    assert params_checksum(state.student) == params_checksum(fresh.student)
    assert params_checksum(state.teacher.params) == params_checksum(state.student)
    assert state.phase == "adapt" and state.bank.num_active() == 0


def test_burn_in_rejects_unlabeled(data):
    sources, target, _ = data
    with pytest.raises(TrainingError):
        burn_in([sources[0], target], TrainConfig(**SMALL))


def test_burn_in_deterministic(data):
    sources, _, _ = data
    cfg = TrainConfig(**SMALL)
    a, b = burn_in(sources, cfg), burn_in(sources, cfg)
    assert params_checksum(a.student) == params_checksum(b.student)
    assert a.data_digest == b.data_digest


def test_zero_weights_equal_supervised_step(data):
    sources, target, _ = data
    cfg = TrainConfig(**SMALL, alpha=0.0, beta=0.0, gamma=0.0)
    state = adapted_state(cfg, sources)
    state.student.double()
    state.teacher.params.double()
    state.optimizer = torch.optim.SGD(state.student.parameters(), lr=cfg.learning_rate, momentum=cfg.sgd_momentum)
    twin = state.clone()
    src, tgt = batches(state, sources, target)
    src = [type(b)(b.images.double(), b.annotations, b.domain) for b in src]
    tgt = type(tgt)(tgt.weak.double(), tgt.strong.double())
    adapt_step(state, src, tgt)
    twin.phase = "burn_in"
    burn_in_step(twin, src)
    for (n, p), q in zip(state.student.named_parameters(), twin.student.parameters()):
        assert torch.equal(p, q), n


def test_step_total_matches_components(data):
    sources, target, _ = data
    cfg = TrainConfig(**SMALL)
    state = adapted_state(cfg, sources)
    for _ in range(3):
        src, tgt = batches(state, sources, target)
        rep = adapt_step(state, src, tgt)
        l = rep.losses
        assert l.total == l.sup + cfg.alpha * l.unsup + cfg.beta * l.dis + cfg.gamma * l.prot
        assert all(math.isfinite(v) for v in (l.sup, l.unsup, l.dis, l.prot, rep.grad_norm))


def test_threshold_one_keeps_training(data):
    sources, target, _ = data
    cfg = TrainConfig(**SMALL).replace(pseudo_label_threshold=1.0)
    state = adapted_state(cfg, sources)
    src, tgt = batches(state, sources, target)
    rep = adapt_step(state, src, tgt)
    assert rep.pseudo_count == 0
    # only sources contribute prototypes
    assert int(state.bank.counts[2].sum()) == 0 and state.bank.num_active() > 0


def test_teacher_moves_only_by_ema(data):
    sources, target, _ = data
    cfg = TrainConfig(**SMALL)
    state = adapted_state(cfg, sources)
    m = cfg.ema_momentum
    for _ in range(2):
        before = {n: p.clone() for n, p in state.teacher.params.named_parameters()}
        src, tgt = batches(state, sources, target)
        adapt_step(state, src, tgt)
        for n, p in state.teacher.params.named_parameters():
            s = dict(state.student.named_parameters())[n]
            assert torch.allclose(p, m * before[n] + (1 - m) * s.detach(), atol=1e-6)
            bound = (1 - m) * (before[n] - s.detach()).abs().max()
            assert (p - before[n]).abs().max() <= bound + 1e-6


def test_active_prototypes_never_decrease(data):
    sources, target, target_eval = data
    cfg = TrainConfig(**SMALL).replace(adapt_epochs=2)
    state = adapted_state(cfg, sources)
    log = MetricsLog()
    adapt(state, sources, target, metrics=log)
    active = [r["active_protos"] for r in log.rows]
    assert active == sorted(active) and active[-1] > 0


def test_nan_aborts_step(data):
    sources, target, _ = data
    cfg = TrainConfig(**SMALL)
    state = adapted_state(cfg, sources)
    with torch.no_grad():
        state.student.det_head.cls.bias[0] = float("nan")
    src, tgt = batches(state, sources, target)
    with pytest.raises(TrainingError, match="sup"):
        adapt_step(state, src, tgt)


def test_adapt_requires_burn_in(data):
    sources, target, _ = data
    state = init_state(TrainConfig(**SMALL))
    with pytest.raises(TrainingError):
        adapt(state, sources, target)


def test_zero_adapt_epochs_leaves_state(data):
    sources, target, _ = data
    cfg = TrainConfig(**SMALL).replace(adapt_epochs=0)
    state = burn_in(sources, cfg)
    before = params_checksum(state.student), params_checksum(state.teacher.params)
    adapt(state, sources, target)
    assert (params_checksum(state.student), params_checksum(state.teacher.params)) == before


def test_ablations_see_identical_data(data, tmp_path):
    sources, target, target_eval = data
    cfg = TrainConfig(**SMALL)
    state = burn_in(sources, cfg)
    digests = {ab: run_experiment(cfg, sources, target, target_eval, ablation=ab,
                                  burned=(state, MetricsLog())).state.data_digest
               for ab in ("none", "mt_only", "no_sep")}
    assert len(set(digests.values())) == 1


def test_metrics_file(data, tmp_path):
    sources, target, target_eval = data
    res = run_experiment(TrainConfig(**SMALL), sources, target, target_eval, out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",")[:4] == ["phase", "epoch", "step", "sup"]
    assert (tmp_path / "ckpt_epoch000.pt").is_file() and (tmp_path / "ckpt_epoch001.pt.json").is_file()
    assert res.evaluated == "teacher" and 0.0 <= res.target_ap50 <= 1.0


def test_stream_cycles_all_indices():
    s = BatchStream(5, 2, np.random.default_rng(0))
    seen = [i for _ in range(5) for i in s.next()]
    assert sorted(seen[:10]) == sorted(list(range(5)) * 2)
