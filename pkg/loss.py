"""
Pairwise sigmoid contrastive loss with learnable temperature and bias, and
the symmetric InfoNCE baseline it is compared against.

Both losses return closed-form gradients w.r.t. the cosine scores s, the
log-temperature u (tau = exp(u)) and the bias beta.
"""
import enum
import math
from dataclasses import dataclass

import numpy as np

from config import BETA_INIT, GRADCHECK_STEP, TAU_INIT
from core import SignMatrix, SimilarityMatrix, sign_matrix
from errors import InvalidInputError, NumericError, ShapeError


class LogitForm(str, enum.Enum):
    SIGLIP_CONSISTENT = 'SIGLIP_CONSISTENT'   # s' = s / tau + beta
    PAPER_LITERAL = 'PAPER_LITERAL'           # s' = (s + beta) / tau


@dataclass(frozen=True)
class LossParams:
    """tau is stored through u = ln(tau) so it stays positive under any update."""
    u: float
    beta: float

    @classmethod
    def init(cls, tau=TAU_INIT, beta=BETA_INIT):
        if tau <= 0:
            raise InvalidInputError(f"temperature must be positive, got {tau}")
        return cls(u=math.log(tau), beta=float(beta))

    @property
    def tau(self):
        return math.exp(self.u)


@dataclass(frozen=True)
class LossOutput:
    loss: float
    grad_s: np.ndarray
    grad_u: float
    grad_beta: float


# ========================
# Stable primitives
# ========================

def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    # sigma(x) = exp(-softplus(-x)) never exponentiates a large positive
    return np.exp(-softplus(-np.asarray(x, dtype=np.float64)))


def log_sigmoid(x):
    return -softplus(-np.asarray(x, dtype=np.float64))


def _check_finite(x, name):
    bad = ~np.isfinite(x)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericError(f"non-finite {name} at {idx}", index=idx)


def _scores(S):
    scores = S.scores if isinstance(S, SimilarityMatrix) else np.asarray(S, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"expected a square score matrix, got {scores.shape}")
    return scores


# ========================
# Sigmoid loss
# ========================

def siglip_logits(S, params: LossParams, form=LogitForm.SIGLIP_CONSISTENT):
    s = _scores(S)
    tau = params.tau
    if LogitForm(form) is LogitForm.PAPER_LITERAL:
        return (s + params.beta) / tau
    return s / tau + params.beta


def siglip_loss(s_prime, psi: SignMatrix, params: LossParams = None,
                form=LogitForm.SIGLIP_CONSISTENT) -> LossOutput:
    """
    L = -(1/B) sum_ij log sigma(s'_ij * psi_ij).

    grad_s, grad_u and grad_beta are chain-ruled through the selected logit
    form; without `params` only grad_s' is meaningful and is returned in grad_s.
    """
    s_prime = np.asarray(s_prime, dtype=np.float64)
    psi_arr = psi.entries if isinstance(psi, SignMatrix) else np.asarray(psi, dtype=np.float64)
    if s_prime.ndim != 2 or s_prime.shape[0] != s_prime.shape[1] or s_prime.shape != psi_arr.shape:
        raise ShapeError(f"logits {s_prime.shape} do not match sign matrix {psi_arr.shape}")
    _check_finite(s_prime, "logit")

    B = s_prime.shape[0]
    z = s_prime * psi_arr
    loss = float(softplus(-z).sum() / B)
    grad_sp = -(psi_arr / B) * sigmoid(-z)

    if params is None:
        return LossOutput(loss, grad_sp, 0.0, 0.0)

    tau = params.tau
    grad_s = grad_sp / tau
    if LogitForm(form) is LogitForm.PAPER_LITERAL:
        # s' = (s + beta) e^{-u}
        grad_beta = float(grad_sp.sum() / tau)
        grad_u = float(-(grad_sp * s_prime).sum())
    else:
        # s' = s e^{-u} + beta
        grad_beta = float(grad_sp.sum())
        grad_u = float(-(grad_sp * (s_prime - params.beta)).sum())
    _check_finite(grad_s, "gradient")
    return LossOutput(loss, grad_s, grad_u, grad_beta)


def siglip_objective(S, params: LossParams, form=LogitForm.SIGLIP_CONSISTENT) -> LossOutput:
    """Logits, sign matrix and loss for one square score matrix."""
    s_prime = siglip_logits(S, params, form)
    return siglip_loss(s_prime, sign_matrix(s_prime.shape[0]), params, form)


# ========================
# InfoNCE baseline
# ========================

def _log_softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def infonce_loss(S, tau) -> LossOutput:
    """Symmetric cross-entropy over softmax(S / tau) rows and columns, diagonal targets."""
    s = _scores(S)
    _check_finite(s, "score")
    if tau <= 0:
        raise InvalidInputError(f"temperature must be positive, got {tau}")
    B = s.shape[0]
    logits = s / tau
    log_p_rows = _log_softmax(logits, axis=1)
    log_p_cols = _log_softmax(logits, axis=0)
    diag = np.arange(B)
    loss = float(-(log_p_rows[diag, diag].sum() + log_p_cols[diag, diag].sum()) / (2 * B))

    eye = np.eye(B)
    grad_logits = ((np.exp(log_p_rows) - eye) + (np.exp(log_p_cols) - eye)) / (2 * B)
    grad_s = grad_logits / tau
    # logits = s e^{-u}
    grad_u = float(-(grad_logits * logits).sum())
    _check_finite(grad_s, "gradient")
    return LossOutput(loss, grad_s, grad_u, 0.0)


def infonce_objective(S, params: LossParams, form=None) -> LossOutput:
    return infonce_loss(S, params.tau)


OBJECTIVES = {
    'sigmoid': siglip_objective,
    'infonce': infonce_objective,
}


def get_objective(name):
    try:
        return OBJECTIVES[name.lower()]
    except KeyError:
        raise InvalidInputError(f"Unknown loss: {name}") from None


# ========================
# Gradient verification
# ========================

def _relative_error(analytic, numeric):
    """Largest entry error over the largest gradient magnitude of the tensor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


def objective_gradcheck(objective, S, params: LossParams, form=LogitForm.SIGLIP_CONSISTENT,
                        h=GRADCHECK_STEP):
    """Max relative error of analytic grad_s, grad_u, grad_beta vs central differences."""
    s = np.array(_scores(S), dtype=np.float64)
    out = objective(s, params, form)

    def loss_at(s_, p_):
        return objective(s_, p_, form).loss

    num_s = np.zeros_like(s)
    for idx in np.ndindex(*s.shape):
        orig = s[idx]
        s[idx] = orig + h
        plus = loss_at(s, params)
        s[idx] = orig - h
        minus = loss_at(s, params)
        s[idx] = orig
        num_s[idx] = (plus - minus) / (2 * h)

    num_u = (loss_at(s, LossParams(params.u + h, params.beta))
             - loss_at(s, LossParams(params.u - h, params.beta))) / (2 * h)
    num_beta = (loss_at(s, LossParams(params.u, params.beta + h))
                - loss_at(s, LossParams(params.u, params.beta - h))) / (2 * h)

    return max(_relative_error(out.grad_s, num_s),
               _relative_error(out.grad_u, num_u),
               _relative_error(out.grad_beta, num_beta))


def random_scores(B, seed):
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=(B, B))


def siglip_gradcheck(B, seed, form=LogitForm.SIGLIP_CONSISTENT, params: LossParams = None):
    if not 2 <= B <= 64:
        raise InvalidInputError(f"gradcheck batch size must be in [2, 64], got {B}")
    params = params or LossParams.init()
    return objective_gradcheck(siglip_objective, random_scores(B, seed), params, form)


def infonce_gradcheck(B, seed, params: LossParams = None):
    if not 2 <= B <= 64:
        raise InvalidInputError(f"gradcheck batch size must be in [2, 64], got {B}")
    params = params or LossParams.init()
    return objective_gradcheck(infonce_objective, random_scores(B, seed), params)
