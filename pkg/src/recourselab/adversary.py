"""Two-phase adversarial training against recourse audits.

Phase one jointly learns model parameters and a perturbation vector so that
perturbed non-protected inputs are already accepted; phase two fine-tunes the
parameters so clean recourse costs look balanced across groups while the
perturbed searches stay cheap.  The coupling between parameters and search
outcomes is differentiated implicitly: at a converged counterfactual the
objective's candidate-gradient vanishes, which turns the parameter sensitivity
into an inverse-Hessian times mixed-partial product, realized here with
central finite differences so only black-box access to the search is needed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np

from . import explainers
from .data import Dataset
from .explainers import CfObjective, Initializer, SearchBudget
from .model import AdamState, MlpClassifier, TrainingDiverged, adam_step, load_model, save_model

STATIONARITY_TOL = 1e-2
HESSIAN_FD_STEP = 1e-4
PIN_TOL = 1e-6
RCOND_MIN = 1e-10
FULL_INVERSE_MAX_DIM = 20
DIAG_MIN = 1e-12


class HessianConditionError(RuntimeError):
    """Full inverse refused; retry with the diagonal approximation."""


class Phase2Aborted(RuntimeError):
    def __init__(self, not_found_rate: float, step: int):
        self.not_found_rate = not_found_rate
        self.step = step
        super().__init__(
            f"counterfactual search failed on {not_found_rate:.0%} of audit points "
            f"at phase-2 step {step}; the explainer cannot audit this model")


@dataclass
class JacobianEstimate:
    """d x m sensitivity of the found counterfactual to the model parameters."""

    matrix: np.ndarray
    mode: str                      # "full-inverse" | "diagonal-approximation"
    hessian_rcond: float
    stationarity_inf_norm: float
    approximate: bool              # stationarity tolerance exceeded


def implicit_jacobian(model: MlpClassifier, x, objective: CfObjective, x_cf,
                      dataset: Dataset, *, lam: float | None = None, mode: str = "auto",
                      fd_step: float = HESSIAN_FD_STEP,
                      stationarity_tol: float = STATIONARITY_TOL,
                      pin_tol: float = PIN_TOL,
                      dice_candidates=None, dice_index=None) -> JacobianEstimate:
    """Differentiate a converged counterfactual with respect to the parameters.

    Both second-derivative blocks are realized by central finite differences
    of the objective's first derivatives around `x_cf` (2d gradient
    evaluations), so nothing about the search optimizer is assumed.

    All four objectives carry an l1-at-query term, so their optima are
    sparse: coordinates left within `pin_tol` of the query sit at kinks,
    stay put under small parameter changes, and get exact zero rows; the
    inverse-Hessian system is solved on the moved coordinates, where
    classical stationarity applies.  A counterfactual whose moved
    coordinates are not stationary within `stationarity_tol` (inf-norm)
    yields an estimate flagged `approximate`.  Masked-off features also
    contribute zero rows.
    """
    x = np.asarray(x, dtype=float)
    x_cf = np.asarray(x_cf, dtype=float)
    d = dataset.d
    m = model.param_count
    if objective.feature_mask is None:
        mutable = np.ones(d, dtype=bool)
    else:
        mutable = np.asarray(objective.feature_mask, dtype=bool)
    free = mutable & (np.abs(x_cf - x) > pin_tol)
    mut = np.flatnonzero(free)
    dm = mut.size

    def grad_x(point):
        return explainers.objective_grad_x(
            model, x, point, objective, dataset, lam=lam,
            dice_candidates=dice_candidates, dice_index=dice_index)

    def grad_theta(point):
        return explainers.objective_grad_params(model, x, point, objective, lam=lam)

    g0 = grad_x(x_cf)
    stationarity = float(np.max(np.abs(g0[mut]))) if dm else 0.0
    approximate = stationarity > stationarity_tol

    hessian = np.zeros((dm, dm))
    mixed = np.zeros((dm, m))
    for row, j in enumerate(mut):
        bump = np.zeros(d)
        bump[j] = fd_step
        gx_hi = grad_x(x_cf + bump)
        gx_lo = grad_x(x_cf - bump)
        hessian[row] = (gx_hi - gx_lo)[mut] / (2.0 * fd_step)
        gt_hi = grad_theta(x_cf + bump)
        gt_lo = grad_theta(x_cf - bump)
        mixed[row] = (gt_hi - gt_lo) / (2.0 * fd_step)
    hessian = 0.5 * (hessian + hessian.T)

    if mode == "auto":
        mode = "full-inverse" if dm <= FULL_INVERSE_MAX_DIM else "diagonal-approximation"
    if mode == "full-inverse":
        if dm == 0:
            rcond, solved = 1.0, np.zeros((0, m))
        else:
            cond = np.linalg.cond(hessian)
            rcond = 0.0 if not np.isfinite(cond) else (1.0 / cond if cond > 0 else 0.0)
            if rcond < RCOND_MIN:
                raise HessianConditionError(
                    f"candidate Hessian reciprocal condition {rcond:.2e} below "
                    f"{RCOND_MIN:.0e}; use mode='diagonal-approximation'")
            solved = -np.linalg.solve(hessian, mixed)
    elif mode == "diagonal-approximation":
        if dm == 0:
            rcond, solved = 1.0, np.zeros((0, m))
        else:
            diag = np.diag(hessian).copy()
            if np.min(np.abs(diag)) < DIAG_MIN:
                raise HessianConditionError("candidate Hessian diagonal is numerically zero")
            rcond = float(np.min(np.abs(diag)) / np.max(np.abs(diag)))
            solved = -mixed / diag[:, None]
    else:
        raise ValueError(f"unknown mode {mode!r}")

    matrix = np.zeros((d, m))
    matrix[mut] = solved
    return JacobianEstimate(matrix=matrix, mode=mode, hessian_rcond=float(rcond),
                            stationarity_inf_norm=stationarity, approximate=approximate)


@dataclass
class TermGrad:
    grad: np.ndarray
    found: bool
    cost: float
    result: explainers.CfResult
    skipped: bool = False


def counterfactual_term_grad(model: MlpClassifier, x, delta, objective: CfObjective,
                             dataset: Dataset, *,
                             initializer: Initializer = Initializer(),
                             budget: SearchBudget = SearchBudget(),
                             mode: str = "auto") -> TermGrad:
    """Parameter gradient of the recourse cost d_W(x, A(x + delta)).

    Runs the search at the (optionally perturbed) query, then chains the cost
    gradient at the found counterfactual through the implicit Jacobian.
    Failed searches contribute a zero gradient; queries the model already
    accepts have exactly zero sensitivity (the search returns the query
    itself, whose cost does not involve the parameters).
    """
    x = np.asarray(x, dtype=float)
    query = x if delta is None else x + np.asarray(delta, dtype=float)
    result = explainers.find_counterfactual(
        model, query, objective, dataset, initializer, budget, cost_reference=x)
    m = model.param_count
    if not result.found:
        return TermGrad(grad=np.zeros(m), found=False, cost=float("nan"), result=result)
    if result.query_was_valid:
        return TermGrad(grad=np.zeros(m), found=True, cost=result.cost, result=result)
    try:
        est = _jacobian_for_result(model, query, objective, dataset, result, mode)
    except HessianConditionError:
        return TermGrad(grad=np.zeros(m), found=True, cost=result.cost,
                        result=result, skipped=True)
    v = np.sign(result.x_cf - x) / dataset.mad
    return TermGrad(grad=v @ est.matrix, found=True, cost=result.cost, result=result)


def _jacobian_for_result(model, query, objective, dataset, result, mode):
    kwargs = {}
    if objective.kind == "dice":
        kwargs = {"dice_candidates": result.candidates, "dice_index": result.candidate_index}
    try:
        return implicit_jacobian(model, query, objective, result.x_cf, dataset,
                                 lam=result.final_lam, mode=mode, **kwargs)
    except HessianConditionError:
        if mode == "auto":
            return implicit_jacobian(model, query, objective, result.x_cf, dataset,
                                     lam=result.final_lam,
                                     mode="diagonal-approximation", **kwargs)
        raise


# -- phase one -------------------------------------------------------------------


@dataclass
class Phase1Config:
    steps: int = 10_000
    lr: float = 0.01
    seed: int = 0
    hidden: tuple[int, ...] = (200, 200, 200, 200)
    bce_weight: float = 1.0
    counterfactual_weight: float = 1.0
    delta_size_weight: float = 1.0
    feature_mask: tuple[bool, ...] | None = None


@dataclass
class Phase1Result:
    model: MlpClassifier
    delta: np.ndarray
    loss_trace: np.ndarray
    delta_l1_trace: np.ndarray


def phase1_fit(dataset: Dataset, config: Phase1Config) -> Phase1Result:
    """Joint descent on parameters and perturbation.

    Per step: cross entropy on the train split, a squared push making
    perturbed non-protected negatives look accepted, and the MAD-weighted
    l1 size of the perturbation.  Both variables take Adam steps
    simultaneously; the perturbation starts at zero.

    The push set is the label-negative non-protected train rows: a fixed
    target the parameters cannot drain by re-predicting (audits slice by
    prediction instead, but the training push needs a stable population).
    """
    net = MlpClassifier([dataset.d, *config.hidden, 1], seed=config.seed)
    delta = np.zeros(dataset.d)
    if config.feature_mask is not None:
        mutable = np.asarray(config.feature_mask, dtype=bool)
    else:
        mutable = np.ones(dataset.d, dtype=bool)

    X = dataset.train_features
    y = dataset.train_labels
    tr = dataset.train_idx
    np_neg_rows = tr[(~dataset.protected[tr]) & (dataset.labels[tr] == 0)]
    X_np = dataset.features[np_neg_rows]

    theta_state = AdamState(lr=config.lr)
    delta_state = AdamState(lr=config.lr)
    losses = np.empty(config.steps)
    delta_l1 = np.empty(config.steps)

    for step in range(config.steps):
        B = X_np + delta
        bce = net.bce_loss(X, y)
        g_theta = config.bce_weight * net.grad_params_bce(X, y)
        g_delta = np.zeros(dataset.d)
        push = 0.0
        if B.shape[0]:
            push = net.squared_push_loss(B)
            g_theta += config.counterfactual_weight * net.grad_params_squared_push(B)
            gin, probs, _ = net.grad_input_full(B, wrt="prob")
            g_delta += config.counterfactual_weight * np.mean(
                2.0 * (probs - 1.0)[:, None] * gin, axis=0)
        size = float(np.sum(np.abs(delta) / dataset.mad))
        g_delta += config.delta_size_weight * np.sign(delta) / dataset.mad
        g_delta[~mutable] = 0.0

        loss = config.bce_weight * bce + config.counterfactual_weight * push \
            + config.delta_size_weight * size
        if not np.isfinite(loss):
            raise TrainingDiverged(step)
        losses[step] = loss
        delta_l1[step] = np.sum(np.abs(delta))

        net.set_flat(adam_step(theta_state, net.flatten(), g_theta))
        delta = adam_step(delta_state, delta, g_delta)
        delta[~mutable] = 0.0

    return Phase1Result(model=net, delta=delta, loss_trace=losses,
                        delta_l1_trace=delta_l1)


# -- phase two -------------------------------------------------------------------


@dataclass
class Phase2Config:
    objective: CfObjective
    steps: int = 15
    lr: float = 0.01
    seed: int = 0
    subsample: int = 256
    initializer: Initializer = field(default_factory=Initializer)
    budget: SearchBudget = field(default_factory=SearchBudget)
    bce_weight: float = 1.0
    np_cost_weight: float = 1.0
    disparity_weight: float = 1.0
    jacobian_mode: str = "auto"
    abort_not_found_rate: float = 0.5


@dataclass
class Phase2Step:
    disparity: float
    np_delta_cost: float
    np_clean_cost: float
    pr_clean_cost: float
    bce: float
    objective: float
    constraint_ok: bool
    not_found: int


@dataclass
class AdversarialArtifact:
    model: MlpClassifier
    delta: np.ndarray
    phase1_loss_trace: np.ndarray
    phase1_delta_l1_trace: np.ndarray
    phase2_steps: list[Phase2Step]
    constraint_satisfied: bool
    explainer_kind: str

    @property
    def delta_l1(self) -> float:
        return float(np.sum(np.abs(self.delta)))


def _batch_term_grads(model, origins, queries, objective, dataset, initializer,
                      budget, mode):
    """Search a batch and chain each found counterfactual through its Jacobian."""
    batch = explainers.batch_explain(model, queries, objective, dataset,
                                     initializer, budget, cost_reference=origins)
    m = model.param_count
    grads, costs = [], []
    for origin, query, r in zip(origins, queries, batch.results):
        if not r.found:
            continue
        costs.append(r.cost)
        if r.query_was_valid:
            grads.append(np.zeros(m))
            continue
        try:
            est = _jacobian_for_result(model, query, objective, dataset, r, mode)
        except HessianConditionError:
            grads.append(np.zeros(m))
            continue
        v = np.sign(r.x_cf - origin) / dataset.mad
        grads.append(v @ est.matrix)
    mean_cost = float(np.mean(costs)) if costs else float("nan")
    mean_grad = np.mean(grads, axis=0) if grads else np.zeros(m)
    return mean_cost, mean_grad, batch.not_found, len(batch.results)


def phase2_fit(model: MlpClassifier, delta: np.ndarray, dataset: Dataset,
               config: Phase2Config) -> AdversarialArtifact:
    """Parameter-only refinement against the audit metrics.

    Each step searches a fixed audit subsample three ways (protected clean,
    non-protected clean, non-protected perturbed), descends on
    bce + E[np perturbed cost] + (clean disparity)^2, and keeps the best
    iterate that satisfies the perturbed-cheaper-than-protected constraint.
    The perturbation is never modified here.
    """
    net = model.clone()
    delta = np.asarray(delta, dtype=float)
    X = dataset.train_features
    y = dataset.train_labels

    slices = dataset.group_slices(net, split="train")
    rng = np.random.default_rng(config.seed)
    audit_idx = {}
    for role in ("protected-neg", "nonprotected-neg"):
        idx = slices[role].indices
        if idx.size > config.subsample:
            idx = np.sort(rng.choice(idx, size=config.subsample, replace=False))
        audit_idx[role] = idx
    pr = dataset.features[audit_idx["protected-neg"]]
    np_ = dataset.features[audit_idx["nonprotected-neg"]]

    state = AdamState(lr=config.lr)
    telemetry: list[Phase2Step] = []
    best_flat = None
    best_objective = np.inf
    constraint_ever = False

    for step in range(config.steps + 1):
        np_delta_cost, g_np_delta, nf1, n1 = _batch_term_grads(
            net, np_, np_ + delta, config.objective, dataset,
            config.initializer, config.budget, config.jacobian_mode)
        np_clean_cost, g_np_clean, nf2, n2 = _batch_term_grads(
            net, np_, np_, config.objective, dataset,
            config.initializer, config.budget, config.jacobian_mode)
        pr_clean_cost, g_pr_clean, nf3, n3 = _batch_term_grads(
            net, pr, pr, config.objective, dataset,
            config.initializer, config.budget, config.jacobian_mode)
        total = max(n1 + n2 + n3, 1)
        not_found = nf1 + nf2 + nf3
        if not_found / total > config.abort_not_found_rate:
            raise Phase2Aborted(not_found / total, step)

        bce = net.bce_loss(X, y)
        disparity = pr_clean_cost - np_clean_cost
        objective_value = (config.bce_weight * bce
                           + config.np_cost_weight * np_delta_cost
                           + config.disparity_weight * disparity ** 2)
        constraint_ok = bool(np.isfinite(np_delta_cost) and np.isfinite(pr_clean_cost)
                             and np_delta_cost < pr_clean_cost)
        telemetry.append(Phase2Step(
            disparity=float(abs(disparity)) if np.isfinite(disparity) else float("nan"),
            np_delta_cost=np_delta_cost, np_clean_cost=np_clean_cost,
            pr_clean_cost=pr_clean_cost, bce=bce,
            objective=float(objective_value), constraint_ok=constraint_ok,
            not_found=not_found))
        if constraint_ok:
            constraint_ever = True
            if objective_value < best_objective:
                best_objective = objective_value
                best_flat = net.flatten()

        if step == config.steps:
            break
        grad = config.bce_weight * net.grad_params_bce(X, y) \
            + config.np_cost_weight * g_np_delta
        if np.isfinite(disparity):
            grad = grad + config.disparity_weight * 2.0 * disparity * (g_pr_clean - g_np_clean)
        net.set_flat(adam_step(state, net.flatten(), grad))

    if best_flat is not None:
        net.set_flat(best_flat)
    return AdversarialArtifact(
        model=net, delta=delta.copy(),
        phase1_loss_trace=np.empty(0), phase1_delta_l1_trace=np.empty(0),
        phase2_steps=telemetry, constraint_satisfied=constraint_ever,
        explainer_kind=config.objective.kind)


def run_attack(dataset: Dataset, phase1: Phase1Config, phase2: Phase2Config) -> AdversarialArtifact:
    """Phase one then phase two; returns the assembled artifact."""
    stage1 = phase1_fit(dataset, phase1)
    artifact = phase2_fit(stage1.model, stage1.delta, dataset, phase2)
    artifact.phase1_loss_trace = stage1.loss_trace
    artifact.phase1_delta_l1_trace = stage1.delta_l1_trace
    return artifact


# -- artifact serialization --------------------------------------------------------


def save_artifact(artifact: AdversarialArtifact, directory) -> dict[str, str]:
    """Checkpoint plus perturbation CSV plus telemetry JSON."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model_path = directory / "model.npz"
    delta_path = directory / "delta.csv"
    telemetry_path = directory / "telemetry.json"
    save_model(artifact.model, model_path)
    write_delta_csv(artifact.delta, delta_path)
    telemetry = {
        "phase1": {
            "loss_trace": artifact.phase1_loss_trace.tolist(),
            "delta_l1_trace": artifact.phase1_delta_l1_trace.tolist(),
        },
        "phase2": {
            "explainer": artifact.explainer_kind,
            "constraint_satisfied": artifact.constraint_satisfied,
            "steps": [vars(s) for s in artifact.phase2_steps],
        },
    }
    telemetry_path.write_text(json.dumps(telemetry, indent=2, allow_nan=True))
    return {"model": str(model_path), "delta": str(delta_path),
            "telemetry": str(telemetry_path)}


def load_artifact(directory) -> AdversarialArtifact:
    directory = Path(directory)
    net = load_model(directory / "model.npz")
    delta = read_delta_csv(directory / "delta.csv")
    telemetry = json.loads((directory / "telemetry.json").read_text())
    steps = [Phase2Step(**s) for s in telemetry["phase2"]["steps"]]
    return AdversarialArtifact(
        model=net, delta=delta,
        phase1_loss_trace=np.array(telemetry["phase1"]["loss_trace"]),
        phase1_delta_l1_trace=np.array(telemetry["phase1"]["delta_l1_trace"]),
        phase2_steps=steps,
        constraint_satisfied=telemetry["phase2"]["constraint_satisfied"],
        explainer_kind=telemetry["phase2"]["explainer"])


def write_delta_csv(delta: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "delta"])
        for i, v in enumerate(np.asarray(delta, dtype=float)):
            writer.writerow([i, repr(float(v))])


def read_delta_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.array([float(row[1]) for row in reader])
