"""Skinning-weight generator: bias-free decoder with group-wise dense layers,
encoder, WGAN critic, their losses and the two training phases.

The decoder produces a *residual* that is added to the learned linear
skinning parameters. No decoder layer has a bias and ``swish(0) = 0``, so a
zero latent code maps to the linear weights exactly.
"""
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .optim import Adam

# ---------------------------------------------------------------------------
# activations and layers
# ---------------------------------------------------------------------------


def swish(x):
    if isinstance(x, ad.Var):
        return ad.swish(x)
    return x * ad.sigmoid_np(x)


@dataclass
class DenseLayer:
    X: int
    Y: int
    bias: bool = False

    def param_shapes(self):
        shapes = {"weight": (self.X, self.Y)}
        if self.bias:
            shapes["bias"] = (self.Y,)
        return shapes

    def param_count(self):
        return self.X * self.Y + (self.Y if self.bias else 0)

    def forward(self, x, p):
        y = x @ p["weight"]
        if self.bias:
            y = y + p["bias"]
        return y


@dataclass
class GroupwiseDenseLayer:
    """``n`` contiguous input groups share one ``(X/n) x (Y/n)`` block."""

    X: int
    Y: int
    n: int

    def __post_init__(self):
        if self.X % self.n or self.Y % self.n:
            raise ValueError(f"group count {self.n} must divide X={self.X} and Y={self.Y}")

    bias = False

    def param_shapes(self):
        return {"weight": (self.X // self.n, self.Y // self.n)}

    def param_count(self):
        return (self.X // self.n) * (self.Y // self.n)

    def forward(self, x, p):
        shape = np.shape(ad.value_of(x))
        lead = shape[:-1]
        xg = x.reshape(lead + (self.n, self.X // self.n))
        return (xg @ p["weight"]).reshape(lead + (self.Y,))


def groupwise_forward(layer, block, x):
    """Apply a group-wise layer with shared ``block`` to a vector or batch."""
    if np.shape(ad.value_of(x))[-1] != layer.X:
        raise ValueError(f"input width {np.shape(ad.value_of(x))[-1]} != {layer.X}")
    return layer.forward(x, {"weight": block})


class Network:
    """Layer stack with swish between layers and a linear output."""

    def __init__(self, layers, rng=None, out_scale=1.0):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.Y != b.X:
                raise ValueError(f"layer widths do not chain: {a.Y} -> {b.X}")
        self.params = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        for i, layer in enumerate(self.layers):
            for name, shape in layer.param_shapes().items():
                key = f"{i}.{name}"
                if name == "bias":
                    self.params[key] = np.zeros(shape)
                else:
                    scale = 1.0 / np.sqrt(shape[0])
                    if i == len(self.layers) - 1:
                        scale *= out_scale
                    self.params[key] = rng.normal(0.0, scale, size=shape)

    @property
    def in_dim(self):
        return self.layers[0].X

    @property
    def out_dim(self):
        return self.layers[-1].Y

    def param_count(self):
        return sum(layer.param_count() for layer in self.layers)

    def forward(self, x, params=None):
        p = self.params if params is None else params
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer.forward(h, {name: p[f"{i}.{name}"] for name in layer.param_shapes()})
            if i < last:
                h = swish(h)
        return h

    def variables(self, tape):
        return {k: tape.var(v, name=k) for k, v in self.params.items()}

    def round_to_float32(self):
        for k in self.params:
            self.params[k] = self.params[k].astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------


@dataclass
class DecoderConfig:
    latent_dim: int = 50
    dense_dims: tuple = (105, 122, 250)
    group_layers: tuple = ((500, 2), (1100, 5), (8990, 10))

    @classmethod
    def paper_scale(cls):
        return cls()

    @classmethod
    def for_output(cls, out_dim, latent_dim=16, width=8):
        """Small decoder ending in ``out_dim`` with two group-wise layers."""
        n = next(g for g in (10, 8, 6, 5, 4, 3, 2, 1) if out_dim % g == 0)
        c = 2 * width * n
        return cls(latent_dim, (2 * latent_dim, 4 * latent_dim, c), ((2 * c, 2), (out_dim, n)))

    @property
    def out_dim(self):
        return self.group_layers[-1][0] if self.group_layers else self.dense_dims[-1]

    def layers(self):
        dims = (self.latent_dim,) + tuple(self.dense_dims)
        out = [DenseLayer(a, b, bias=False) for a, b in zip(dims, dims[1:])]
        x = dims[-1]
        for y, n in self.group_layers:
            out.append(GroupwiseDenseLayer(x, y, n))
            x = y
        return out

    def to_dict(self):
        return {"latent_dim": self.latent_dim, "dense_dims": list(self.dense_dims),
                "group_layers": [list(g) for g in self.group_layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["latent_dim"]), tuple(d["dense_dims"]), tuple(tuple(g) for g in d["group_layers"]))


class SkinDecoder(Network):
    def __init__(self, config, rng=None, out_scale=0.1):
        self.config = config
        super().__init__(config.layers(), rng, out_scale)
        if any(layer.bias for layer in self.layers):
            raise ValueError("decoder layers must be bias-free")

    @property
    def latent_dim(self):
        return self.config.latent_dim


def encoder_dims(in_dim, latent_dim, n_layers=None):
    """Halve the width per layer, then project to the latent size."""
    dims = [in_dim]
    if n_layers is None:
        while dims[-1] // 2 >= 2 * latent_dim:
            dims.append(dims[-1] // 2)
    else:
        for _ in range(n_layers - 1):
            dims.append(max(dims[-1] // 2, latent_dim))
    dims.append(latent_dim)
    return dims


class SkinEncoder(Network):
    def __init__(self, in_dim, latent_dim, rng=None, n_layers=None):
        dims = encoder_dims(in_dim, latent_dim, n_layers)
        super().__init__([DenseLayer(a, b, bias=True) for a, b in zip(dims, dims[1:])], rng)


def critic_dims(in_dim, latent_dim=50, width=256, up=4, down=4):
    up_dims = np.linspace(latent_dim, width, up + 1).round().astype(int).tolist()
    down_dims = np.linspace(width, 1, down + 1).round().astype(int).tolist()
    return [in_dim] + up_dims + down_dims[1:]


class Critic(Network):
    """Input projection to the latent width, then up to ``width`` and down to 1."""

    def __init__(self, in_dim, latent_dim=50, width=256, rng=None):
        dims = critic_dims(in_dim, latent_dim, width)
        super().__init__([DenseLayer(a, b, bias=True) for a, b in zip(dims, dims[1:])], rng)

    def score(self, x, params=None):
        out = self.forward(x, params)
        return out.reshape(np.shape(ad.value_of(out))[:-1])

    def clip(self, c):
        for k in self.params:
            np.clip(self.params[k], -c, c, out=self.params[k])


def decoder_forward(decoder, Z, linear_weights, params=None):
    """Linear skinning parameters plus the decoder residual for latent ``Z``."""
    lw = np.asarray(linear_weights, dtype=np.float64)
    if np.shape(ad.value_of(Z))[-1] != decoder.latent_dim:
        raise ValueError(f"latent width {np.shape(ad.value_of(Z))[-1]} != {decoder.latent_dim}")
    if lw.shape[-1] != decoder.out_dim:
        raise ValueError(f"decoder emits {decoder.out_dim} values, rig has {lw.shape[-1]} weight classes")
    return decoder.forward(Z, params) + lw


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def critic_loss(c_real, c_fake):
    """``mean_i (C(J_i) - C(D(Z_i)))``; the critic is trained by ascending it."""
    m = np.shape(ad.value_of(c_real))[0]
    if m == 0:
        raise ValueError("empty batch")
    d = c_real - c_fake
    return ad.mean(d) if isinstance(d, ad.Var) else float(np.mean(d))


def generator_loss(targets, generated, residual, c_fake, lambda0=0.05, lambda1=0.1):
    """``sum_i |J_i - D(Z_i)|_1 + lambda0 |residual_i|_1 - lambda1 C(D(Z_i))``."""
    rec = targets - generated
    if isinstance(generated, ad.Var) or isinstance(residual, ad.Var) or isinstance(c_fake, ad.Var):
        total = ad.vabs(rec).sum() + lambda0 * ad.vabs(residual).sum()
        return total - lambda1 * (c_fake.sum() if isinstance(c_fake, ad.Var) else float(np.sum(c_fake)))
    return float(np.abs(rec).sum() + lambda0 * np.abs(residual).sum() - lambda1 * np.sum(c_fake))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainSchedule:
    ae_steps: int = 2000
    ae_lr: float = 1e-3
    gan_steps: int = 30000
    gan_lr: float = 1e-4
    critic_lr: float = 1e-4
    batch_size: int = 85
    critic_steps: int = 5
    ae_critic_steps: int = 1
    clip: float = 0.01
    lambda0: float = 0.05
    lambda1: float = 0.1
    match_pool: int = 1024
    log_every: int = 1


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    sink: object = None

    def emit(self, **rec):
        self.records.append(rec)
        if self.sink is not None:
            self.sink.write(json.dumps(rec) + "\n")


class DivergenceError(FloatingPointError):
    pass


def _check_finite(value, where, step):
    if not np.isfinite(value):
        raise DivergenceError(f"{where} diverged at step {step} (value {value})")


def _critic_update(critic, opt, real, fake, clip):
    tape = ad.Tape()
    cp = critic.variables(tape)
    loss = critic_loss(critic.score(real, cp), critic.score(fake, cp))
    ascend = -loss
    grads = tape.gradient(ascend, list(cp.values()))
    opt.step(critic.params, dict(zip(cp, grads)))
    critic.clip(clip)
    return float(loss.value)


def _params_of(*nets):
    out = {}
    for tag, net in nets:
        out.update({f"{tag}/{k}": v for k, v in net.params.items()})
    return out


def reconstruction_l1(encoder, decoder, corpus, linear):
    """Mean absolute error per parameter after an encode/decode round trip."""
    gen = decoder_forward(decoder, encoder.forward(corpus), linear)
    return float(np.mean(np.abs(gen - corpus)))


def train_autoencoder_phase(encoder, decoder, critic, corpus, linear, schedule, rng, log=None):
    """Phase 1: encoder + decoder minimise the generator loss with ``Z = E(J)``.

    The critic is updated alongside (``ae_critic_steps`` per step) so the
    adversarial term has a meaningful signal.
    """
    corpus = np.asarray(corpus, dtype=np.float64)
    log = log or TrainLog()
    opt = Adam(_params_of(("enc", encoder), ("dec", decoder)), lr=schedule.ae_lr)
    copt = Adam(critic.params, lr=schedule.critic_lr)
    bs = min(schedule.batch_size, len(corpus))
    for step in range(schedule.ae_steps):
        idx = rng.choice(len(corpus), size=bs, replace=False)
        batch = corpus[idx]
        c_loss = float("nan")
        if schedule.lambda1 > 0:
            for _ in range(schedule.ae_critic_steps):
                fake = decoder_forward(decoder, encoder.forward(batch), linear)
                c_loss = _critic_update(critic, copt, batch, fake, schedule.clip)
        tape = ad.Tape()
        ep, dp = encoder.variables(tape), decoder.variables(tape)
        z = encoder.forward(batch, ep)
        residual = decoder.forward(z, dp)
        gen = residual + linear
        c_fake = critic.score(gen)
        g_loss = generator_loss(batch, gen, residual, c_fake, schedule.lambda0, schedule.lambda1)
        _check_finite(float(g_loss.value), "autoencoder phase", step)
        wrt = list(ep.values()) + list(dp.values())
        grads = tape.gradient(g_loss, wrt)
        names = [f"enc/{k}" for k in ep] + [f"dec/{k}" for k in dp]
        opt.step(_params_of(("enc", encoder), ("dec", decoder)), dict(zip(names, grads)))
        if step % schedule.log_every == 0 or step == schedule.ae_steps - 1:
            rec = float(np.mean(np.abs(gen.value - batch)))
            log.emit(phase="autoencoder", step=step, critic_loss=c_loss, gen_loss=float(g_loss.value), recon_l1=rec)
    decoder.round_to_float32()
    return encoder, decoder


def nearest_corpus_match(generated, corpus):
    """Index of the L1-nearest corpus row for each generated row."""
    d = np.abs(generated[:, None, :] - corpus[None, :, :]).sum(axis=2)
    return np.argmin(d, axis=1)


def finetune_decoder_gan_phase(decoder, critic, corpus, linear, schedule, rng, log=None):
    """Phase 2: decoder fed ``Z ~ N(0, I)``; WGAN with weight clipping.

    Reconstruction targets are the L1-nearest corpus samples to each generated
    vector, drawn from a random pool of ``match_pool`` corpus rows.
    """
    corpus = np.asarray(corpus, dtype=np.float64)
    log = log or TrainLog()
    opt = Adam(decoder.params, lr=schedule.gan_lr)
    copt = Adam(critic.params, lr=schedule.critic_lr)
    bs = min(schedule.batch_size, len(corpus))
    latent = decoder.latent_dim
    for step in range(schedule.gan_steps):
        c_loss = float("nan")
        for _ in range(schedule.critic_steps):
            real = corpus[rng.choice(len(corpus), size=bs, replace=False)]
            fake = decoder_forward(decoder, rng.standard_normal((bs, latent)), linear)
            c_loss = _critic_update(critic, copt, real, fake, schedule.clip)
            _check_finite(c_loss, "critic", step)
        z = rng.standard_normal((bs, latent))
        tape = ad.Tape()
        dp = decoder.variables(tape)
        residual = decoder.forward(z, dp)
        gen = residual + linear
        pool = corpus if len(corpus) <= schedule.match_pool else corpus[
            rng.choice(len(corpus), size=schedule.match_pool, replace=False)]
        targets = pool[nearest_corpus_match(gen.value, pool)]
        c_fake = critic.score(gen)
        g_loss = generator_loss(targets, gen, residual, c_fake, schedule.lambda0, schedule.lambda1)
        _check_finite(float(g_loss.value), "decoder fine-tune", step)
        grads = tape.gradient(g_loss, list(dp.values()))
        opt.step(decoder.params, dict(zip(dp, grads)))
        if step % schedule.log_every == 0 or step == schedule.gan_steps - 1:
            log.emit(phase="gan", step=step, critic_loss=c_loss, gen_loss=float(g_loss.value),
                     recon_l1=float(np.mean(np.abs(gen.value - targets))))
    decoder.round_to_float32()
    return decoder


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"RIGFTDEC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(decoder, path):
    """Binary layout: magic, u32 version, u32 header length, JSON header,
    then every parameter block as little-endian float32 in header order."""
    names = sorted(decoder.params, key=lambda k: (int(k.split(".")[0]), k))
    header = {
        "config": decoder.config.to_dict(),
        "blocks": [[k, list(decoder.params[k].shape)] for k in names],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        for k in names:
            fh.write(np.ascontiguousarray(decoder.params[k], dtype="<f4").tobytes())


def load_checkpoint(path, expected_out_dim=None):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC or len(data) < 16:
        raise CheckpointError(f"{path}: not a decoder checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads version {VERSION}")
    try:
        header = json.loads(data[16:16 + hlen].decode())
        config = DecoderConfig.from_dict(header["config"])
        blocks = [(str(name), tuple(int(s) for s in shape)) for name, shape in header["blocks"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupted header ({exc})") from None
    decoder = SkinDecoder(config)
    offset = 16 + hlen
    for name, shape in blocks:
        if name not in decoder.params or tuple(decoder.params[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: block {name} {shape} does not match the decoder layout")
        count = int(np.prod(shape))
        chunk = data[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise CheckpointError(f"{path}: truncated at block {name}")
        decoder.params[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
        offset += 4 * count
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last block")
    if expected_out_dim is not None and decoder.out_dim != expected_out_dim:
        raise CheckpointError(f"{path}: decoder emits {decoder.out_dim} values, rig expects {expected_out_dim}")
    return decoder
