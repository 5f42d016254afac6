"""Held-out comparison of falloff, learned-linear and neural skinning on toy identities.

Each synthetic identity is a random pose of the toy rig whose skinning weights
are the shared truth scaled by smooth symmetric modes
(:func:`~rigfit.synth.make_identities`). The falloff weights the rig ships with
are biased away from that truth, so there is something for stage 1 to learn.

The whole pipeline runs as it would on scans: stage 1 on the training
identities, a transform corpus, per-pose weight fits, the autoencoder phase and
a test-time fit per held-out identity. Errors are mean point-to-point distances
as a fraction of the bounding-box diagonal.
"""
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .fitting import FitConfig, MeshTarget, Model, fit_test_time
from .neural import Critic, DecoderConfig, SkinDecoder, SkinEncoder, TrainSchedule, reconstruction_l1, train_autoencoder_phase
from .synth import (CorpusSpec, ToyRigConfig, harvest_transform_corpus, make_identities, make_toy_rig,
                    synthesize_samples, weight_modes)


@dataclass
class TrendConfig:
    rig: ToyRigConfig = field(default_factory=ToyRigConfig)
    n_train: int = 24
    n_test: int = 10
    n_modes: int = 2
    mode_scale: float = 2.0
    # sharp modes: smooth ones are largely absorbed by pose during stage 1
    mode_smoothness: float = 0.05
    pose_scale: float = 0.3
    # bias of the shipped falloff weights relative to the truth
    bias_modes: int = 4
    bias_scale: float = 0.5
    snapshots: int = 4
    cycles: int = 2
    perturb: int = 0
    latent: int = 8
    width: int = 16
    critic_width: int = 32
    ae_steps: int = 3000
    batch_size: int = 32
    fit: dict = field(default_factory=lambda: {
        "rmse_inside": True, "stage1_pose_iters": 300, "stage1_weight_iters": 300, "weight_lr": 1e-3,
        "pose_lr": 3e-3, "weight_fit_max_iters": 200})
    test_fit: dict = field(default_factory=lambda: {"rmse_inside": True, "root_warmup_iters": 0})
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class TrendResult:
    falloff: float
    linear: float
    neural: float
    oracle: float
    n_test: int
    per_identity: dict
    recon_l1: float
    seconds: float


def run_trend_benchmark(config=None, log=None):
    cfg = config or TrendConfig()
    say = log or (lambda **kw: None)
    t0 = time.perf_counter()
    rig = make_toy_rig(cfg.rig)
    rng = np.random.default_rng(cfg.seed)
    diag = rig.mesh.bbox_diagonal()
    falloff = rig.weights.free_params
    bias = weight_modes(rig, cfg.bias_modes, rng)
    truth = falloff * np.exp(cfg.bias_scale * rng.uniform(-1, 1, cfg.bias_modes) @ bias)
    modes = weight_modes(rig, cfg.n_modes, rng, cfg.mode_smoothness)
    train = make_identities(rig, cfg.n_train, rng, base_free=truth, modes=modes, mode_scale=cfg.mode_scale,
                            pose_scale=cfg.pose_scale)
    test = make_identities(rig, cfg.n_test, rng, base_free=truth, modes=modes, mode_scale=cfg.mode_scale,
                           pose_scale=cfg.pose_scale)

    fit_cfg = FitConfig.from_mapping({**cfg.fit, "stage1_cycles": cfg.cycles, "seed": cfg.seed})
    spec = CorpusSpec(snapshots_per_fit=cfg.snapshots, cycles=cfg.cycles, perturb_copies=cfg.perturb,
                      seed=cfg.seed)
    scans = list(train.vertices)
    corpus = harvest_transform_corpus(rig, scans, spec, fit_cfg)
    linear = corpus.learned_free
    samples = np.array([s.params for s in synthesize_samples(rig, corpus, scans, fit_cfg)])
    say(event="corpus", samples=len(samples), seconds=round(time.perf_counter() - t0, 1))

    n_cls = rig.weights.n_classes
    r = np.random.default_rng(cfg.seed + 1)
    dec = SkinDecoder(DecoderConfig.for_output(n_cls, latent_dim=cfg.latent, width=cfg.width), r)
    enc = SkinEncoder(n_cls, cfg.latent, r)
    crit = Critic(n_cls, cfg.latent, cfg.critic_width, r)
    sched = TrainSchedule(ae_steps=cfg.ae_steps, gan_steps=0, batch_size=cfg.batch_size)
    train_autoencoder_phase(enc, dec, crit, samples, linear, sched, r)
    recon = reconstruction_l1(enc, dec, samples, linear)
    say(event="decoder", recon_l1=recon, seconds=round(time.perf_counter() - t0, 1))

    test_cfg = FitConfig.from_mapping(cfg.test_fit)

    def errors(model_for, fit_z):
        out = []
        for i in range(cfg.n_test):
            res = fit_test_time(model_for(i), MeshTarget(test.vertices[i]), test_cfg, fit_z=fit_z)
            out.append(res.report.mean / diag)
        return out

    per = {
        "falloff": errors(lambda i: Model(rig, falloff), False),
        "linear": errors(lambda i: Model(rig, linear), False),
        "neural": errors(lambda i: Model(rig, linear, dec), True),
        "oracle": errors(lambda i: Model(rig, test.free[i]), False),
    }
    means = {k: float(np.mean(v)) for k, v in per.items()}
    say(event="errors", **means, seconds=round(time.perf_counter() - t0, 1))
    return TrendResult(means["falloff"], means["linear"], means["neural"], means["oracle"], cfg.n_test,
                       per, recon, time.perf_counter() - t0)
