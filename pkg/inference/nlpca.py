"""
NLPCA joint-density model.

Only the decoder x = W2·σ(W1·z + b1) + b2 is learned; latent codes are free
parameters trained alongside the weights, and encoding a new point means
running gradient descent on its latent code with the weights fixed.
Missing components are simply left out of every loss and gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit
from sklearn.preprocessing import StandardScaler

from inference.gaussian_core import safe_inverse, safe_solve
from utils.errors import DegeneracyError, InversionError, InvertibilityError, TrainingError
from utils.logger import get_logger
from utils.seeding import substream
from utils.telemetry import get_tracer

logger = get_logger("NLPCA")
tracer = get_tracer("nlpca")

R_FLOOR = 1e-8
MIN_LR_FRACTION = 2.0 ** -30
MAX_LATENT_STEP = 1.0
LM_INITIAL_DAMPING = 1e-3
LM_MIN_DAMPING = 1e-9
RISE_TOLERANCE = 1e-9
DIVERGENCE_CHECKS = 5


@dataclass
class DecoderNetwork:
    """
    Decoder h(z) = W2·σ(W1·z + b1) + b2 with output noise covariance R.

    ``offset`` and ``scale`` map states to model space, u = (x − offset)/scale;
    every array below lives in model space.
    """
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    R: np.ndarray
    offset: np.ndarray | None = None
    scale: np.ndarray | None = None
    latent_codes: np.ndarray | None = None
    training: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W1 = np.atleast_2d(np.asarray(self.W1, dtype=float))
        self.b1 = np.asarray(self.b1, dtype=float).ravel()
        self.W2 = np.atleast_2d(np.asarray(self.W2, dtype=float))
        self.b2 = np.asarray(self.b2, dtype=float).ravel()
        R = np.asarray(self.R, dtype=float)
        self.R = np.diag(R) if R.ndim == 1 else np.atleast_2d(R)
        d = self.b2.size
        self.offset = np.zeros(d) if self.offset is None else np.asarray(self.offset, dtype=float).ravel()
        self.scale = np.ones(d) if self.scale is None else np.asarray(self.scale, dtype=float).ravel()
        if self.W1.shape != (self.m, self.q) or self.W2.shape != (d, self.m) or self.b1.size != self.m:
            raise ValueError(f"Inconsistent decoder shapes W1 {self.W1.shape}, b1 {self.b1.shape}, "
                             f"W2 {self.W2.shape}, b2 {self.b2.shape}")
        if self.R.shape != (d, d):
            raise ValueError(f"R must be {d}x{d}, got {self.R.shape}")
        if self.latent_codes is not None:
            self.latent_codes = np.asarray(self.latent_codes, dtype=float).reshape(-1, self.q)

    @property
    def q(self) -> int:
        return self.W1.shape[1]

    @property
    def m(self) -> int:
        return self.W1.shape[0]

    @property
    def d(self) -> int:
        return self.b2.size

    @property
    def n_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def to_model(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.offset) / self.scale

    def from_model(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, dtype=float) * self.scale + self.offset

    def copy(self) -> "DecoderNetwork":
        return replace(self, W1=self.W1.copy(), b1=self.b1.copy(), W2=self.W2.copy(), b2=self.b2.copy(),
                       R=self.R.copy(), offset=self.offset.copy(), scale=self.scale.copy(),
                       latent_codes=None if self.latent_codes is None else self.latent_codes.copy(),
                       training=dict(self.training))


@dataclass(frozen=True)
class LatentCode:
    z: np.ndarray
    loss: float = 0.0
    steps: int = 0


@dataclass(frozen=True)
class AvailabilityMask:
    observed: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "observed", np.asarray(self.observed, dtype=bool).ravel())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.observed)


@dataclass(frozen=True)
class FactorCovariance:
    latent_cov: np.ndarray               # S_z, q×q
    output_cov: np.ndarray               # H·S_z·Hᵀ + R, d×d
    reconstruction_jacobian: np.ndarray  # G, d×d with zero columns for masked inputs


@dataclass(frozen=True)
class TrainingResult:
    net: DecoderNetwork
    codes: np.ndarray
    rmse: float
    history: list


def _mask_of(mask, d: int) -> np.ndarray:
    if mask is None:
        return np.ones(d, dtype=bool)
    if isinstance(mask, AvailabilityMask):
        return mask.observed
    return np.asarray(mask, dtype=bool).ravel()


def default_dims(d: int) -> tuple[int, int]:
    """Latent and hidden widths for output dim d: q = ⌊d/2⌋, m = d."""
    if d < 1:
        raise ValueError(f"Output dimension must be positive, got {d}")
    return d // 2, d


def param_count(d: int) -> int:
    """Decoder weights and biases for output dim d (latent codes excluded)."""
    if d < 1:
        raise ValueError(f"Output dimension must be positive, got {d}")
    q, m = default_dims(d)
    if q == 0:
        raise ValueError(f"Output dimension {d} leaves no latent dimension")
    return q * m + m + m * d + d


def init_network(d: int, q: int | None = None, m: int | None = None, seed: int = 0) -> DecoderNetwork:
    """Weights uniform in ±1/√fan_in, seeded; R starts at the identity."""
    dq, dm = default_dims(d)
    q = dq if q is None else q
    m = dm if m is None else m
    if q < 1:
        raise ValueError(f"Output dimension {d} leaves no latent dimension")
    rng = substream(seed, "init", d, q, m)
    lim1, lim2 = 1.0 / np.sqrt(q), 1.0 / np.sqrt(m)
    return DecoderNetwork(
        W1=rng.uniform(-lim1, lim1, size=(m, q)),
        b1=rng.uniform(-lim1, lim1, size=m),
        W2=rng.uniform(-lim2, lim2, size=(d, m)),
        b2=rng.uniform(-lim2, lim2, size=d),
        R=np.eye(d),
    )


def decode(net: DecoderNetwork, z: np.ndarray) -> np.ndarray:
    """Forward pass for one code (q,) or a batch (n, q)."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != net.q:
        raise ValueError(f"Latent code has length {z.shape[-1]}, decoder expects {net.q}")
    hidden = expit(z @ net.W1.T + net.b1)
    return hidden @ net.W2.T + net.b2


def jacobian(net: DecoderNetwork, z: np.ndarray) -> np.ndarray:
    """H = W2·diag(σ'(W1z + b1))·W1, shape d×q."""
    z = np.asarray(z, dtype=float).ravel()
    if z.size != net.q:
        raise ValueError(f"Latent code has length {z.size}, decoder expects {net.q}")
    s = expit(net.W1 @ z + net.b1)
    return (net.W2 * (s * (1.0 - s))) @ net.W1


def _weights(net: DecoderNetwork, obs: np.ndarray) -> np.ndarray:
    w = 1.0 / np.maximum(np.diag(net.R)[obs], R_FLOOR)
    return w / w.mean()


def initial_code(net: DecoderNetwork, x: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Stored code of the training sample nearest to x on the observed coordinates (zeros if none)."""
    if net.latent_codes is None or len(net.latent_codes) == 0:
        return np.zeros(net.q)
    recon = decode(net, net.latent_codes)[:, obs]
    distance = np.sum((recon - x[obs]) ** 2, axis=1)
    return net.latent_codes[int(np.argmin(distance))].copy()


def invert(net: DecoderNetwork, x_partial, mask=None, z0=None, steps: int = 500, lr: float = 0.05,
           method: str = "gradient", tol: float = 1e-12) -> LatentCode:
    """
    Encode a (partially observed) model-space point by descending on its latent code.

    Minimizes ½ Σ_observed w_i (x_i − h(z)_i)² with w ∝ 1/R_ii. Masked entries of
    ``x_partial`` are never read. A step is only accepted if it lowers the loss;
    otherwise the gradient step is halved, or the Gauss-Newton damping raised tenfold
    (Levenberg-Marquardt), and the step retried. No step moves any latent
    coordinate by more than ``MAX_LATENT_STEP``, and each rejection halves that
    limit until a step is accepted.

    Raises
    ------
    InversionError
        If no component is observed, or the loss rises (or turns non-finite) on
        ``DIVERGENCE_CHECKS`` consecutive checks.
    """
    if method not in ("gradient", "gauss-newton"):
        raise ValueError(f"Unknown inversion method '{method}'")
    x = np.asarray(x_partial, dtype=float).ravel()
    obs = _mask_of(mask, net.d)
    if x.size != net.d or obs.size != net.d:
        raise ValueError(f"Point/mask length {x.size}/{obs.size} does not match decoder output {net.d}")
    idx = np.flatnonzero(obs)
    if idx.size == 0:
        raise InversionError("Cannot invert NLPCA model: no observed component")
    target = x[idx]
    w = _weights(net, obs)
    z = initial_code(net, x, obs) if z0 is None else np.asarray(z0, dtype=float).ravel().copy()

    def loss_of(code):
        r = target - decode(net, code)[idx]
        return 0.5 * float(np.sum(w * r * r)), r

    loss, r = loss_of(z)
    trace = [loss]
    step_size = lr
    damping = LM_INITIAL_DAMPING
    damping_scale = None
    radius = MAX_LATENT_STEP
    rises = 0
    taken = 0
    for taken in range(1, steps + 1):
        H = jacobian(net, z)[idx]
        grad = -H.T @ (w * r)
        if not np.any(grad) or np.max(np.abs(grad)) < tol:
            break
        if method == "gradient":
            delta = -step_size * grad
        else:
            normal = H.T @ (H * w[:, None])
            if damping_scale is None:
                damping_scale = max(float(np.trace(normal)) / net.q, R_FLOOR)
            try:
                delta = safe_solve(normal + damping * damping_scale * np.eye(net.q), -grad,
                                   label="damped latent normal matrix")
            except InvertibilityError:
                delta = -grad / (damping * damping_scale)
        largest = float(np.max(np.abs(delta)))
        if largest > radius:
            delta = delta * (radius / largest)
        if largest < tol * (1.0 + float(np.max(np.abs(z)))):
            break
        candidate = z + delta
        new_loss, new_r = loss_of(candidate)
        if np.isfinite(new_loss) and new_loss <= loss:
            z, loss, r = candidate, new_loss, new_r
            trace.append(loss)
            rises = 0
            step_size = min(step_size * 1.05, lr)
            damping = max(damping / 3.0, LM_MIN_DAMPING)
            radius = min(2.0 * radius, MAX_LATENT_STEP)
            continue
        if np.isfinite(new_loss) and new_loss - loss <= RISE_TOLERANCE * loss:
            # Rounding-level rise: nothing left to gain at this point.
            break
        rises += 1
        trace.append(new_loss)
        if rises >= DIVERGENCE_CHECKS:
            raise InversionError(f"NLPCA inversion diverged: loss rose on {rises} consecutive checks "
                                 f"after {taken} steps", trace=trace)
        step_size *= 0.5
        damping *= 10.0
        radius = 0.5 * min(radius, largest)
    return LatentCode(z=z, loss=loss, steps=taken)


def reconstruct(net: DecoderNetwork, x_partial, mask=None, **inversion) -> np.ndarray:
    """g(x) = h(h⁻¹(x)): full model-space vector including imputations for masked entries."""
    return decode(net, invert(net, x_partial, mask, **inversion).z)


def factor_covariance(net: DecoderNetwork, z_solution, mask=None) -> FactorCovariance:
    """
    Latent covariance S_z = (H̃ᵀR̃⁻¹H̃)⁻¹ and its output-space propagation.

    G = H·S_z·H̃ᵀR̃⁻¹ is the Gauss-Newton sensitivity of the reconstruction to
    the observed inputs; Σ_out = H·S_z·Hᵀ + R is the joint factor covariance.
    """
    z = z_solution.z if isinstance(z_solution, LatentCode) else np.asarray(z_solution, dtype=float)
    obs = _mask_of(mask, net.d)
    idx = np.flatnonzero(obs)
    H = jacobian(net, z)
    Ht = H[idx]
    Rt_inv = safe_inverse(net.R[np.ix_(idx, idx)], label="R (observed rows)")
    try:
        S_z = safe_inverse(Ht.T @ Rt_inv @ Ht, label="latent information H̃ᵀR̃⁻¹H̃")
    except InvertibilityError as e:
        raise DegeneracyError(f"NLPCA Jacobian is rank deficient on the observed rows: {e}")
    G = np.zeros((net.d, net.d))
    G[:, idx] = H @ S_z @ Ht.T @ Rt_inv
    S_out = H @ S_z @ H.T + net.R
    return FactorCovariance(latent_cov=S_z, output_cov=0.5 * (S_out + S_out.T), reconstruction_jacobian=G)


@dataclass(frozen=True)
class FactorTerms:
    """State-space quantities a joint factor needs at one linearization point."""
    reconstruction: np.ndarray
    jacobian: np.ndarray
    covariance: np.ndarray
    code: LatentCode


def factor_terms(net: DecoderNetwork, x, mask=None, z0=None, **inversion) -> FactorTerms:
    """Reconstruction g(x), its Jacobian G and Σ_out expressed in state units."""
    x = np.asarray(x, dtype=float).ravel()
    obs = _mask_of(mask, net.d)
    code = invert(net, net.to_model(x), obs, z0=z0, **inversion)
    cov = factor_covariance(net, code, obs)
    s = net.scale
    return FactorTerms(
        reconstruction=net.from_model(decode(net, code.z)),
        jacobian=cov.reconstruction_jacobian * s[:, None] / s[None, :],
        covariance=cov.output_cov * np.outer(s, s),
        code=code,
    )


def masked_loss_and_gradients(net: DecoderNetwork, codes: np.ndarray, data: np.ndarray, mask=None,
                              weight_decay: float = 0.0) -> tuple[float, dict]:
    """
    Loss (1/2n)·Σ mask·(h(z_n) − x_n)² and its exact gradients.

    Returns
    -------
    tuple
        ``(loss, grads)`` with grads keyed ``W1, b1, W2, b2, codes``.
    """
    codes = np.atleast_2d(np.asarray(codes, dtype=float))
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n = data.shape[0]
    M = np.ones_like(data, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    X = np.where(M, data, 0.0)
    A1 = codes @ net.W1.T + net.b1
    S = expit(A1)
    Y = S @ net.W2.T + net.b2
    E = np.where(M, Y - X, 0.0)
    loss = 0.5 * float(np.sum(E * E)) / n
    E = E / n
    dS = E @ net.W2
    dA1 = dS * S * (1.0 - S)
    grads = {
        "W2": E.T @ S,
        "b2": E.sum(axis=0),
        "W1": dA1.T @ codes,
        "b1": dA1.sum(axis=0),
        "codes": dA1 @ net.W1,
    }
    if weight_decay:
        loss += 0.5 * weight_decay * float(np.sum(net.W1 ** 2) + np.sum(net.W2 ** 2))
        grads["W1"] = grads["W1"] + weight_decay * net.W1
        grads["W2"] = grads["W2"] + weight_decay * net.W2
    return loss, grads


def _apply(net: DecoderNetwork, codes: np.ndarray, grads: dict, lr: float, rows) -> tuple[DecoderNetwork, np.ndarray]:
    stepped = replace(net, W1=net.W1 - lr * grads["W1"], b1=net.b1 - lr * grads["b1"],
                      W2=net.W2 - lr * grads["W2"], b2=net.b2 - lr * grads["b2"])
    new_codes = codes.copy()
    # Each code only sees its own sample, so its step is not divided by the batch size.
    new_codes[rows] = codes[rows] - lr * len(rows) * grads["codes"]
    return stepped, new_codes


def train(data: np.ndarray, mask=None, epochs: int = 2000, lr: float = 0.05, seed: int = 0,
          q: int | None = None, m: int | None = None, init: DecoderNetwork | None = None,
          codes: np.ndarray | None = None, batch_size: int = 0, weight_decay: float = 0.0,
          standardize: bool = True, tol: float = 0.0, patience: int = 100) -> TrainingResult:
    """
    Fit decoder weights and per-sample latent codes by gradient descent on the masked MSE.

    A step that increases the loss is rejected and the learning rate halved, so the
    full-batch loss history is non-increasing. ``init``/``codes`` warm-start from an
    earlier fit. With ``tol`` > 0 training stops once the loss has improved by less
    than ``tol`` (relative) over the last ``patience`` epochs. The returned RMSE is in
    the units of ``data``.

    Raises
    ------
    TrainingError
        If the loss becomes NaN.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n, d = data.shape
    if n < 2 or d < 2:
        raise ValueError(f"NLPCA training needs at least 2 samples of dimension ≥ 2, got {n}x{d}")
    M = np.ones_like(data, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if M.shape != data.shape:
        raise ValueError(f"Mask shape {M.shape} does not match data {data.shape}")
    if tol > 0 and patience < 1:
        raise ValueError(f"patience must be ≥ 1 when tol is set, got {patience}")

    with tracer.start_as_current_span("nlpca_train"):
        if init is not None:
            net = init.copy()
        else:
            net = init_network(d, q, m, seed)
            if standardize:
                scaler = StandardScaler().fit(np.where(M, data, np.nan))
                net.offset = np.nan_to_num(scaler.mean_)
                net.scale = np.where(np.isfinite(scaler.scale_) & (scaler.scale_ > 0), scaler.scale_, 1.0)
        U = net.to_model(np.where(M, data, net.offset))
        Z = np.zeros((n, net.q)) if codes is None else np.array(codes, dtype=float).reshape(n, net.q)

        rng = substream(seed, "training", d)
        batch = n if batch_size <= 0 or batch_size >= n else batch_size
        step = lr
        loss, grads = masked_loss_and_gradients(net, Z, U, M, weight_decay)
        history = [loss]
        ran = 0
        for epoch in range(1, epochs + 1):
            ran = epoch
            if batch == n:
                cand_net, cand_Z = _apply(net, Z, grads, step, np.arange(n))
                cand_loss, cand_grads = masked_loss_and_gradients(cand_net, cand_Z, U, M, weight_decay)
                if np.isnan(cand_loss):
                    raise TrainingError(f"NLPCA training produced a NaN loss at epoch {epoch}", epoch=epoch)
                if cand_loss <= loss:
                    net, Z, loss, grads = cand_net, cand_Z, cand_loss, cand_grads
                    step = min(step * 1.05, lr)
                else:
                    step *= 0.5
                    if step < lr * MIN_LR_FRACTION:
                        logger.debug(f"Training converged at epoch {epoch}")
                        break
            else:
                for rows in np.array_split(rng.permutation(n), int(np.ceil(n / batch))):
                    b_loss, b_grads = masked_loss_and_gradients(net, Z[rows], U[rows], M[rows], weight_decay)
                    b_net, b_Z = _apply(net, Z[rows], b_grads, step, np.arange(len(rows)))
                    Z = Z.copy()
                    Z[rows] = b_Z
                    net = b_net
                loss, grads = masked_loss_and_gradients(net, Z, U, M, weight_decay)
                if np.isnan(loss):
                    raise TrainingError(f"NLPCA training produced a NaN loss at epoch {epoch}", epoch=epoch)
            history.append(loss)
            if epoch % 500 == 0:
                logger.debug(f"epoch {epoch}: loss={loss:.6g} lr={step:.3g}")
            if tol > 0 and epoch >= patience and history[-patience - 1] - loss <= tol * history[-patience - 1]:
                logger.debug(f"Training stalled at epoch {epoch}")
                break

        residual = np.where(M, decode(net, Z) - U, 0.0)
        counts = np.maximum(M.sum(axis=0), 1)
        variance = np.sum(residual ** 2, axis=0) / counts
        net.R = np.diag(np.maximum(variance, R_FLOOR))
        net.latent_codes = Z.copy()
        rmse = float(np.sqrt(np.sum((residual * net.scale) ** 2) / max(M.sum(), 1)))
        net.training = {"seed": int(seed), "epochs": int(epochs), "epochs_run": int(ran), "lr": float(lr),
                        "rmse": rmse, "final_loss": float(loss)}
    logger.info(f"NLPCA d={d} q={net.q} m={net.m}: trained {ran} epochs, RMSE={rmse:.4g}")
    return TrainingResult(net=net, codes=Z, rmse=rmse, history=history)
