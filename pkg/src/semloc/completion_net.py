"""Variational encoder-decoder for semantic scene completion.

The encoder maps a one-hot incomplete subvolume (unobserved, free, classes)
to a latent Gaussian; its mean is the descriptor.  The decoder predicts
free/class probabilities for every cell of the complete subvolume.
"""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .voxel_map import FREE, UNOBSERVED

log = logging.getLogger(__name__)

MODEL_MAGIC = b"SVLN"
MODEL_VERSION = 1
LOGVAR_CLAMP = 20.0


class TrainingDivergedError(RuntimeError):
    pass


class NonFiniteGradientError(RuntimeError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite loss or gradient in {layer}")
        self.layer = layer


@dataclass(frozen=True)
class NetArchitecture:
    V: int = 16
    n_labels: int = 8
    widths: tuple[int, int, int] = (16, 32, 64)
    fc: int = 256
    N: int = 32

    def __post_init__(self):
        if self.V % 8 or self.V < 8:
            raise ValueError("V must be a multiple of 8 (three 2x poolings)")
        if len(self.widths) != 3:
            raise ValueError("exactly three encoder blocks")

    @property
    def c_in(self) -> int:
        return self.n_labels + 2

    @property
    def c_out(self) -> int:
        return self.n_labels + 1

    @property
    def coarse(self) -> int:
        return self.V // 8


PRESETS = {
    "desk": NetArchitecture(),
    "large": NetArchitecture(V=32, n_labels=8, widths=(8, 16, 32), fc=256, N=256),
}


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 50
    rho: float = 0.95
    eps: float = 1e-8
    lr: float = 1.0
    dropout_rate: float = 0.10
    w_r: float = 10.0
    w_occ: float = 10.0
    rotate: bool = True
    seed: int = 0


@dataclass
class LatentCode:
    mu: np.ndarray
    logvar: np.ndarray


@dataclass
class LossTerms:
    total: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor
    empty_target: bool = False


class CompletionNet(nn.Module):
    def __init__(self, arch: NetArchitecture):
        super().__init__()
        self.arch = arch
        w = arch.widths
        c = arch.coarse
        self.enc1 = nn.Conv3d(arch.c_in, w[0], 3, padding=1)
        self.enc2 = nn.Conv3d(w[0], w[1], 3, padding=1)
        self.enc3 = nn.Conv3d(w[1], w[2], 3, padding=1)
        self.enc_fc = nn.Linear(w[2] * c**3, arch.fc)
        self.mu_head = nn.Linear(arch.fc, arch.N)
        self.logvar_head = nn.Linear(arch.fc, arch.N)
        self.dec_fc = nn.Linear(arch.N, w[2] * c**3)
        self.dec1 = nn.Conv3d(w[2], w[1], 3, padding=1)
        self.dec2 = nn.Conv3d(w[1], w[0], 3, padding=1)
        self.dec3 = nn.Conv3d(w[0], w[0], 3, padding=1)
        self.out = nn.Conv3d(w[0], arch.c_out, 1)

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = x
        for conv in (self.enc1, self.enc2, self.enc3):
            h = F.max_pool3d(F.relu(conv(h)), 2)
        h = torch.tanh(self.enc_fc(h.flatten(1)))
        return self.mu_head(h), self.logvar_head(h)

    def decode_logits(self, z: torch.Tensor) -> torch.Tensor:
        c = self.arch.coarse
        h = torch.tanh(self.dec_fc(z)).view(-1, self.arch.widths[2], c, c, c)
        for conv in (self.dec1, self.dec2, self.dec3):
            h = F.relu(conv(F.interpolate(h, scale_factor=2, mode="nearest")))
        return self.out(h)

    def activation_pattern(self, x: torch.Tensor, eps: torch.Tensor) -> list[torch.Tensor]:
        """ReLU signs and max-pool winners of a forward pass; equal patterns mean a smooth segment."""
        pat = []
        h = x
        for conv in (self.enc1, self.enc2, self.enc3):
            pre = conv(h)
            pat.append(pre > 0)
            h, idx = F.max_pool3d(F.relu(pre), 2, return_indices=True)
            pat.append(idx)
        h = torch.tanh(self.enc_fc(h.flatten(1)))
        z = reparameterize(self.mu_head(h), self.logvar_head(h), eps)
        c = self.arch.coarse
        h = torch.tanh(self.dec_fc(z)).view(-1, self.arch.widths[2], c, c, c)
        for conv in (self.dec1, self.dec2, self.dec3):
            pre = conv(F.interpolate(h, scale_factor=2, mode="nearest"))
            pat.append(pre > 0)
            h = F.relu(pre)
        return pat

    def forward(self, x: torch.Tensor, eps: torch.Tensor):
        mu, logvar = self.encode(x)
        z = reparameterize(mu, logvar, eps)
        return self.decode_logits(z), mu, logvar


def init_params(net: CompletionNet, seed: int, zero_heads: bool = False) -> CompletionNet:
    """He-uniform weights and small uniform biases, drawn from a private generator."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in net.modules():
            if not isinstance(module, (nn.Conv3d, nn.Linear)):
                continue
            fan_in = module.weight[0].numel()
            bound = float(np.sqrt(6.0 / fan_in))
            w = torch.empty(module.weight.shape, dtype=torch.float32).uniform_(-bound, bound, generator=g)
            b = torch.empty(module.bias.shape, dtype=torch.float32).uniform_(-1, 1, generator=g) / np.sqrt(fan_in)
            module.weight.copy_(w)
            module.bias.copy_(b)
        if zero_heads:
            for head in (net.mu_head, net.logvar_head):
                head.weight.zero_()
                head.bias.zero_()
    return net


def build_net(arch: NetArchitecture, seed: int = 0, dtype=torch.float32) -> CompletionNet:
    return init_params(CompletionNet(arch), seed).to(dtype)


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return mu + torch.exp(0.5 * logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)) * eps


def one_hot(codes, n_states: int, dtype=torch.float32) -> torch.Tensor:
    """(B, V, V, V) uint8 codes to (B, n_states, V, V, V) channels-last-3d tensor."""
    t = torch.as_tensor(np.ascontiguousarray(codes)).long()
    oh = F.embedding(t, torch.eye(n_states, dtype=dtype))  # (B, V, V, V, C)
    return oh.permute(0, 4, 1, 2, 3)


def _batched(codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8)
    return codes[None] if codes.ndim == 3 else codes


def encode(net: CompletionNet, subvolumes, batch_size: int = 256) -> LatentCode:
    """Deterministic latent code for one (V,V,V) or many (B,V,V,V) subvolumes."""
    grids = getattr(subvolumes, "grid", subvolumes)
    single = np.ndim(grids) == 3
    grids = _batched(grids)
    if grids.shape[1:] != (net.arch.V,) * 3:
        raise ValueError(f"subvolume shape {grids.shape[1:]} does not match V={net.arch.V}")
    dtype = next(net.parameters()).dtype
    mus, lvs = [], []
    with torch.no_grad():
        for i in range(0, grids.shape[0], batch_size):
            mu, lv = net.encode(one_hot(grids[i : i + batch_size], net.arch.c_in, dtype))
            mus.append(mu.numpy())
            lvs.append(lv.numpy())
    mu = np.concatenate(mus) if mus else np.empty((0, net.arch.N), np.float32)
    lv = np.concatenate(lvs) if lvs else np.empty((0, net.arch.N), np.float32)
    return LatentCode(mu[0], lv[0]) if single else LatentCode(mu, lv)


def sample_latent(code: LatentCode, rng: np.random.Generator) -> np.ndarray:
    mu = np.asarray(code.mu, dtype=np.float64)
    lv = np.clip(np.asarray(code.logvar, dtype=np.float64), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return mu + np.exp(lv / 2) * rng.standard_normal(mu.shape)


def decode(net: CompletionNet, z) -> np.ndarray:
    """Per-cell class probabilities, shape (V, V, V, C_out) or (B, V, V, V, C_out)."""
    z = np.asarray(z)
    single = z.ndim == 1
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        logits = net.decode_logits(torch.as_tensor(np.atleast_2d(z), dtype=dtype))
        probs = torch.softmax(logits, dim=1).permute(0, 2, 3, 4, 1).numpy()
    return probs[0] if single else probs


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-sample KL(N(mu, exp(logvar)) || N(0, I))."""
    lv = logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
    return 0.5 * (mu.pow(2) + lv.exp() - 1.0 - lv).sum(dim=-1)


def loss(logits: torch.Tensor, target, mu: torch.Tensor, logvar: torch.Tensor, w_r: float = 10.0, w_occ: float = 10.0) -> LossTerms:
    """Batch-mean of ``w_r * recon + kl``.

    ``recon`` for one sample is the weighted sum of per-cell cross entropy
    over observed target cells divided by the number of observed cells;
    occupied cells carry weight ``w_occ``, free cells weight 1.
    """
    target = torch.as_tensor(np.asarray(target, dtype=np.int64)) if not torch.is_tensor(target) else target.long()
    if target.ndim == 3:
        target = target[None]
    observed = target != UNOBSERVED
    cls = (target - 1).clamp(min=0)
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, cls[:, None]).squeeze(1)
    one = torch.ones((), dtype=logits.dtype)
    weight = torch.where(target > FREE, one * w_occ, one) * observed.to(logits.dtype)
    n_obs = observed.flatten(1).sum(1)
    recon = (weight * nll).flatten(1).sum(1) / n_obs.clamp(min=1).to(logits.dtype)
    kl = kl_divergence(mu, logvar)
    total = (w_r * recon + kl).mean()
    return LossTerms(total, recon.mean(), kl.mean(), bool((n_obs == 0).any()))


def loss_from_probs(pred, target, mu, logvar, w_r: float = 10.0, w_occ: float = 10.0):
    """Loss on decoded probabilities (V,V,V,C_out) instead of logits; returns floats."""
    p = torch.as_tensor(np.asarray(pred, dtype=np.float64))
    if p.ndim == 4:
        p = p[None]
    logits = torch.log(p.clamp_min(1e-300)).permute(0, 4, 1, 2, 3)
    mu = torch.as_tensor(np.atleast_2d(np.asarray(mu, dtype=np.float64)))
    lv = torch.as_tensor(np.atleast_2d(np.asarray(logvar, dtype=np.float64)))
    t = loss(logits, target, mu, lv, w_r, w_occ)
    return float(t.total), float(t.recon), float(t.kl), t.empty_target


def _eps(shape, rng: np.random.Generator, dtype) -> torch.Tensor:
    return torch.as_tensor(rng.standard_normal(shape), dtype=dtype)


def batch_loss(net: CompletionNet, incomplete, complete, config: TrainConfig, eps: torch.Tensor) -> LossTerms:
    dtype = next(net.parameters()).dtype
    x = one_hot(_batched(incomplete), net.arch.c_in, dtype)
    logits, mu, logvar = net(x, eps)
    return loss(logits, _batched(complete), mu, logvar, config.w_r, config.w_occ)


def backward(net: CompletionNet, incomplete, complete, config: TrainConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Exact gradients of the mean batch loss for every parameter, keyed by parameter name."""
    inc = _batched(incomplete)
    if inc.shape[0] == 0:
        raise ValueError("empty batch")
    dtype = next(net.parameters()).dtype
    eps = _eps((inc.shape[0], net.arch.N), rng, dtype)
    net.zero_grad(set_to_none=True)
    terms = batch_loss(net, inc, complete, config, eps)
    if not torch.isfinite(terms.total):
        raise NonFiniteGradientError("loss")
    terms.total.backward()
    grads = {}
    for name, p in net.named_parameters():
        g = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(name)
        grads[name] = g.numpy()
    return grads


def gradient_check(
    net: CompletionNet,
    incomplete,
    complete,
    h_step: float = 1e-3,
    n_params: int = 200,
    seed: int = 0,
    config: TrainConfig | None = None,
    return_details: bool = False,
):
    """Max relative error between autograd and central differences over a seeded parameter subset.

    Runs in float64 on a copy of ``net`` with one fixed noise draw.  A
    difference quotient whose +h/-h evaluations land on different ReLU or
    max-pool branches straddles a kink and is not a valid estimate; such
    parameters are skipped and further ones drawn until ``n_params`` valid
    checks exist (or the network is exhausted).
    """
    config = config or TrainConfig()
    net64 = CompletionNet(net.arch).to(torch.float64)
    net64.load_state_dict({k: v.to(torch.float64) for k, v in net.state_dict().items()})
    rng = np.random.default_rng(seed)
    inc, com = _batched(incomplete), _batched(complete)
    eps = _eps((inc.shape[0], net.arch.N), rng, torch.float64)
    x = one_hot(inc, net.arch.c_in, torch.float64)

    net64.zero_grad(set_to_none=True)
    batch_loss(net64, inc, com, config, eps).total.backward()
    params = list(net64.named_parameters())
    sizes = np.array([p.numel() for _, p in params])
    bounds = np.cumsum(sizes)
    candidates = rng.permutation(int(bounds[-1]))

    def same(a, b):
        return all(torch.equal(u, v) for u, v in zip(a, b))

    errs, analytic, numeric, checked = [], [], [], []
    skipped = 0
    with torch.no_grad():
        base = net64.activation_pattern(x, eps)
        for fid in candidates:
            if len(errs) >= n_params:
                break
            pi = int(np.searchsorted(bounds, fid, side="right"))
            local = int(fid - (bounds[pi - 1] if pi else 0))
            _, p = params[pi]
            flat = p.view(-1)
            ga = float(p.grad.view(-1)[local])
            orig = float(flat[local])
            flat[local] = orig + h_step
            lp = float(batch_loss(net64, inc, com, config, eps).total)
            pat_p = net64.activation_pattern(x, eps)
            flat[local] = orig - h_step
            lm = float(batch_loss(net64, inc, com, config, eps).total)
            pat_m = net64.activation_pattern(x, eps)
            flat[local] = orig
            if not (same(base, pat_p) and same(base, pat_m)):
                skipped += 1
                continue
            gn = (lp - lm) / (2 * h_step)
            errs.append(abs(ga - gn) / max(abs(ga), abs(gn), 1e-8))
            analytic.append(ga)
            numeric.append(gn)
            checked.append(int(fid))
    worst = float(max(errs)) if errs else 0.0
    if return_details:
        return GradCheckReport(worst, np.array(analytic), np.array(numeric), len(errs), skipped, np.array(checked, np.int64))
    return worst


@dataclass
class GradCheckReport:
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    n_checked: int
    n_skipped: int
    param_ids: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))  # flat indices into parameters()


# --------------------------------------------------------------------------- training


def augment(inc: np.ndarray, com: np.ndarray, config: TrainConfig, rng: np.random.Generator):
    """Joint random quarter-turn yaw rotation, then dropout of observed input cells."""
    inc = inc.copy()
    com = com.copy()
    if config.rotate:
        ks = rng.integers(0, 4, size=inc.shape[0])
        for i, k in enumerate(ks):
            if k:
                inc[i] = np.rot90(inc[i], k, axes=(0, 1))
                com[i] = np.rot90(com[i], k, axes=(0, 1))
    if config.dropout_rate > 0:
        drop = (rng.random(inc.shape) < config.dropout_rate) & (inc != UNOBSERVED)
        inc[drop] = UNOBSERVED
    return inc, com


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    delta: list[float] = field(default_factory=list)
    delta_r: list[float] = field(default_factory=list)
    delta_kl: list[float] = field(default_factory=list)

    def append(self, epoch, d, r, kl):
        self.epochs.append(epoch)
        self.delta.append(d)
        self.delta_r.append(r)
        self.delta_kl.append(kl)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "delta", "delta_r", "delta_kl"])
            for row in zip(self.epochs, self.delta, self.delta_r, self.delta_kl):
                w.writerow([row[0], *(f"{v:.9g}" for v in row[1:])])


def train(
    incomplete: np.ndarray,
    complete: np.ndarray,
    arch: NetArchitecture,
    config: TrainConfig,
    net: CompletionNet | None = None,
    on_epoch=None,
) -> tuple[CompletionNet, TrainLog]:
    """ADADELTA training on (incomplete, complete) code arrays."""
    n = len(incomplete)
    if n == 0:
        raise ValueError("empty training set")
    torch.set_num_threads(1)
    net = net or build_net(arch, config.seed)
    net.train()
    opt = torch.optim.Adadelta(net.parameters(), lr=config.lr, rho=config.rho, eps=config.eps)
    rng = np.random.default_rng(config.seed)
    history = TrainLog()
    dtype = next(net.parameters()).dtype
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            inc, com = augment(incomplete[idx], complete[idx], config, rng)
            eps = _eps((len(idx), arch.N), rng, dtype)
            opt.zero_grad(set_to_none=True)
            terms = batch_loss(net, inc, com, config, eps)
            if not torch.isfinite(terms.total):
                raise TrainingDivergedError(f"loss became non-finite in epoch {epoch}")
            terms.total.backward()
            opt.step()
            sums += len(idx) * np.array([terms.total.item(), terms.recon.item(), terms.kl.item()])
        d, r, kl = sums / n
        history.append(epoch, d, r, kl)
        log.info("epoch %d delta %.4f recon %.4f kl %.4f", epoch, d, r, kl)
        if on_epoch is not None:
            on_epoch(epoch, d, r, kl)
    net.eval()
    return net, history


def predict_codes(net: CompletionNet, incomplete, batch_size: int = 128) -> np.ndarray:
    """Argmax completion from the latent mean, as subvolume codes (free = 1, class l = l + 1)."""
    inc = _batched(incomplete)
    dtype = next(net.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, inc.shape[0], batch_size):
            mu, _ = net.encode(one_hot(inc[i : i + batch_size], net.arch.c_in, dtype))
            out.append(net.decode_logits(mu).argmax(dim=1).numpy().astype(np.uint8) + 1)
    return np.concatenate(out)


def completion_accuracy(net: CompletionNet, incomplete, complete) -> float:
    com = _batched(complete)
    if com.shape[0] == 0:
        raise ValueError("no evaluation pairs")
    pred = predict_codes(net, incomplete)
    observed = com != UNOBSERVED
    if not observed.any():
        return 0.0
    return float((pred[observed] == com[observed]).mean())


def majority_baseline(complete) -> float:
    """Accuracy of always predicting the most frequent observed state."""
    com = _batched(complete)
    obs = com[com != UNOBSERVED]
    return float(np.bincount(obs).max() / obs.size) if obs.size else 0.0


# --------------------------------------------------------------------------- files


def _param_order(net: CompletionNet) -> list[str]:
    return [name for name, _ in net.named_parameters()]


def save_params(net: CompletionNet, path) -> None:
    a = net.arch
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", MODEL_VERSION))
        f.write(struct.pack("<8I", a.V, a.c_in, a.c_out, *a.widths, a.fc, a.N))
        for name in _param_order(net):
            f.write(dict(net.named_parameters())[name].detach().numpy().astype("<f4").tobytes())


def load_params(path, expect: NetArchitecture | None = None) -> CompletionNet:
    data = Path(path).read_bytes()
    if len(data) < 40 or data[:4] != MODEL_MAGIC:
        raise ValueError("not a completion-net model file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    V, c_in, c_out, w0, w1, w2, fc, N = struct.unpack_from("<8I", data, 8)
    if c_out != c_in - 1:
        raise ValueError("inconsistent channel header")
    arch = NetArchitecture(V=V, n_labels=c_in - 2, widths=(w0, w1, w2), fc=fc, N=N)
    if expect is not None and expect != arch:
        raise ValueError(f"architecture mismatch: file {arch}, expected {expect}")
    net = CompletionNet(arch)
    off = 40
    with torch.no_grad():
        for name, p in net.named_parameters():
            n = p.numel()
            if off + 4 * n > len(data):
                raise ValueError("truncated model file")
            p.copy_(torch.from_numpy(np.frombuffer(data, "<f4", n, off).astype(np.float32).reshape(p.shape)))
            off += 4 * n
    if off != len(data):
        raise ValueError("trailing bytes in model file")
    net.eval()
    return net


def arch_to_dict(arch: NetArchitecture) -> dict:
    d = asdict(arch)
    d["widths"] = list(arch.widths)
    return d


def arch_from_dict(d: dict) -> NetArchitecture:
    d = dict(d)
    d["widths"] = tuple(d["widths"])
    return NetArchitecture(**d)
