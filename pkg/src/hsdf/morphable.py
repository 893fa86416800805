"""Linear morphable shape model and landmark-based pose/coefficient fitting.

The model is mean shape plus identity and expression offset bases (basis
vectors scaled so one coefficient unit equals one standard deviation).
Fitting minimizes squared 2D landmark reprojection error plus Tikhonov
coefficient penalties with damped Gauss-Newton steps and analytic
Jacobians.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    BehindCameraError,
    PerspectiveCamera,
    RigidPose,
    TriangleMesh,
    rotation_from_axis_angle,
)
from .io import read_json, read_raw_f32, write_json, write_raw_f32


@dataclass
class MorphableModel:
    mean_shape: TriangleMesh
    id_basis: np.ndarray  # (K_id, 3V), mm per coefficient unit
    exp_basis: np.ndarray  # (K_exp, 3V)
    landmark_indices: np.ndarray  # (L,) vertex ids
    name: str = "model"

    def __post_init__(self):
        v3 = 3 * self.mean_shape.num_vertices
        self.id_basis = np.asarray(self.id_basis, dtype=np.float64).reshape(-1, v3)
        self.exp_basis = np.asarray(self.exp_basis, dtype=np.float64).reshape(-1, v3)
        self.landmark_indices = np.asarray(self.landmark_indices, dtype=np.int64).ravel()

    @property
    def num_id(self) -> int:
        return self.id_basis.shape[0]

    @property
    def num_exp(self) -> int:
        return self.exp_basis.shape[0]

    def validate(self) -> None:
        self.mean_shape.validate()
        lm = self.landmark_indices
        if lm.size < 6:
            raise ValueError("need at least 6 landmarks")
        if lm.size != np.unique(lm).size:
            raise ValueError("landmark indices must be distinct")
        if lm.min() < 0 or lm.max() >= self.mean_shape.num_vertices:
            raise ValueError("landmark index out of range")


@dataclass
class FitParams:
    id_coeffs: np.ndarray
    exp_coeffs: np.ndarray
    pose: RigidPose
    camera: PerspectiveCamera

    def __post_init__(self):
        self.id_coeffs = np.asarray(self.id_coeffs, dtype=np.float64).ravel()
        self.exp_coeffs = np.asarray(self.exp_coeffs, dtype=np.float64).ravel()

    def validate(self, coeff_bound: float = 4.0) -> None:
        self.pose.validate()
        self.camera.validate()
        for c in (self.id_coeffs, self.exp_coeffs):
            if c.size and np.max(np.abs(c)) > coeff_bound + 1e-9:
                raise ValueError(f"coefficient magnitude exceeds {coeff_bound}")


@dataclass
class FitOptions:
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.5
    max_iters: int = 100
    rel_tol: float = 1e-10
    lambda_id: float = 1e-3
    lambda_exp: float = 1e-3
    coeff_bound: float = 4.0


@dataclass
class FitResult:
    params: FitParams
    rms_px: float
    iterations: int
    converged: bool
    objective_history: list = dfield(default_factory=list)


def synthesize_shape(model: MorphableModel, id_coeffs, exp_coeffs) -> TriangleMesh:
    """vertices = mean + B_id^T id + B_exp^T exp; topology shared."""
    ci = np.asarray(id_coeffs, dtype=np.float64).ravel()
    ce = np.asarray(exp_coeffs, dtype=np.float64).ravel()
    if ci.size != model.num_id or ce.size != model.num_exp:
        raise ValueError("coefficient count does not match basis count")
    offs = np.zeros(3 * model.mean_shape.num_vertices)
    if ci.size:
        offs += ci @ model.id_basis
    if ce.size:
        offs += ce @ model.exp_basis
    verts = model.mean_shape.vertices + offs.reshape(-1, 3)
    return TriangleMesh(
        verts,
        model.mean_shape.faces.copy(),
        uvs=None if model.mean_shape.uvs is None else model.mean_shape.uvs.copy(),
    )


def _landmark_world(model: MorphableModel, params: FitParams) -> np.ndarray:
    mesh = synthesize_shape(model, params.id_coeffs, params.exp_coeffs)
    return params.pose.apply(mesh.vertices[model.landmark_indices])


def project_landmarks(model: MorphableModel, params: FitParams) -> np.ndarray:
    """(L, 2) pixel coordinates of the posed model landmarks."""
    cam = params.camera
    c = cam.pose.apply(_landmark_world(model, params))
    if np.any(c[:, 2] <= 0):
        raise BehindCameraError("a landmark is behind the camera")
    uv = np.empty((c.shape[0], 2))
    uv[:, 0] = cam.ppx + cam.focal * c[:, 0] / c[:, 2]
    uv[:, 1] = cam.ppy + cam.focal * c[:, 1] / c[:, 2]
    return uv


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def _objective(model, params, observed, opts):
    uv = project_landmarks(model, params)
    duv = uv - observed
    obj = float(np.sum(duv**2))
    obj += opts.lambda_id * float(np.sum(params.id_coeffs**2))
    obj += opts.lambda_exp * float(np.sum(params.exp_coeffs**2))
    return obj, duv


def fit_landmarks(
    model: MorphableModel,
    observed: np.ndarray,
    init: FitParams,
    opts: FitOptions = None,
) -> FitResult:
    """Damped Gauss-Newton fit of pose (rotation, translation) and shape
    coefficients against observed 2D landmarks. Focal length and pose
    scale stay fixed. Accepted steps strictly decrease the objective, so
    the reported history is monotone; rank-deficient normal equations
    raise the damping instead of crashing.
    """
    opts = opts or FitOptions()
    model.validate()
    observed = np.asarray(observed, dtype=np.float64).reshape(-1, 2)
    L = model.landmark_indices.size
    if observed.shape[0] != L:
        raise ValueError("observed landmark count does not match the model")

    k_id, k_exp = model.num_id, model.num_exp
    n_par = 6 + k_id + k_exp
    cam = init.camera
    lam_rows = np.concatenate(
        [np.full(k_id, np.sqrt(opts.lambda_id)), np.full(k_exp, np.sqrt(opts.lambda_exp))]
    )
    lm_basis = np.concatenate([model.id_basis, model.exp_basis], axis=0)
    # (K, L, 3) basis displacement at each landmark vertex
    lm_disp = lm_basis.reshape(-1, model.mean_shape.num_vertices, 3)[
        :, model.landmark_indices, :
    ]

    params = FitParams(
        init.id_coeffs.copy(),
        init.exp_coeffs.copy(),
        RigidPose(init.pose.rotation.copy(), init.pose.translation.copy(), init.pose.scale),
        cam,
    )
    obj, _ = _objective(model, params, observed, opts)
    history = [obj]
    mu = opts.damping_init
    iters = 0
    converged = False

    for _ in range(opts.max_iters):
        iters += 1
        # residuals and Jacobian at current params
        mesh = synthesize_shape(model, params.id_coeffs, params.exp_coeffs)
        p_obj = params.pose.apply(mesh.vertices[model.landmark_indices])  # (L,3)
        c = cam.pose.apply(p_obj)
        if np.any(c[:, 2] <= 0):
            raise BehindCameraError("a landmark moved behind the camera during fitting")
        uv = np.empty((L, 2))
        uv[:, 0] = cam.ppx + cam.focal * c[:, 0] / c[:, 2]
        uv[:, 1] = cam.ppy + cam.focal * c[:, 1] / c[:, 2]
        duv = uv - observed

        s_c = cam.pose.scale
        r_c = cam.pose.rotation
        # d(uv)/d(cam point), (L, 2, 3)
        z = c[:, 2]
        j_uv = np.zeros((L, 2, 3))
        j_uv[:, 0, 0] = cam.focal / z
        j_uv[:, 0, 2] = -cam.focal * c[:, 0] / z**2
        j_uv[:, 1, 1] = cam.focal / z
        j_uv[:, 1, 2] = -cam.focal * c[:, 1] / z**2

        # cam point w.r.t. rotation increment w (left-multiplied exp map)
        q = (params.pose.scale * (mesh.vertices[model.landmark_indices] @
                                  params.pose.rotation.T))  # (L,3)
        dc_dw = -s_c * np.einsum("ab,lbc->lac", r_c, np.stack([_skew(qi) for qi in q]))
        dc_dt = np.broadcast_to(s_c * r_c, (L, 3, 3))
        # cam point w.r.t. coefficients: s_c R_c s_o R_o B
        rot_chain = s_c * r_c @ (params.pose.scale * params.pose.rotation)
        dc_dcoef = np.einsum("ab,klb->lak", rot_chain, lm_disp)  # (L, 3, K)

        jac = np.zeros((2 * L + k_id + k_exp, n_par))
        j_pose = np.concatenate([dc_dw, dc_dt], axis=2)  # (L, 3, 6)
        jac[: 2 * L, :6] = np.einsum("lij,ljk->lik", j_uv, j_pose).reshape(2 * L, 6)
        if k_id + k_exp:
            jac[: 2 * L, 6:] = np.einsum("lij,ljk->lik", j_uv, dc_dcoef).reshape(2 * L, -1)
            jac[2 * L :, 6:] = np.diag(lam_rows)
        res = np.concatenate(
            [duv.ravel(), lam_rows * np.concatenate([params.id_coeffs, params.exp_coeffs])]
        )

        jtj = jac.T @ jac
        jtr = jac.T @ res
        diag = np.diag(jtj).copy()
        diag[diag < 1e-12] = 1e-12

        accepted = False
        cand = None
        obj_new = obj
        for _try in range(60):
            try:
                delta = np.linalg.solve(jtj + mu * np.diag(diag), -jtr)
            except np.linalg.LinAlgError:
                mu *= opts.damping_up
                continue
            w, dt = delta[:3], delta[3:6]
            dcoef = delta[6:]
            new_rot = rotation_from_axis_angle(w, float(np.linalg.norm(w))) @ \
                params.pose.rotation
            new_id = params.id_coeffs + dcoef[:k_id]
            new_exp = params.exp_coeffs + dcoef[k_id:]
            b = opts.coeff_bound
            cand = FitParams(
                np.clip(new_id, -b, b),
                np.clip(new_exp, -b, b),
                RigidPose(new_rot, params.pose.translation + dt, params.pose.scale),
                cam,
            )
            try:
                obj_new, _ = _objective(model, cand, observed, opts)
            except BehindCameraError:
                mu *= opts.damping_up
                continue
            if obj_new <= obj:
                accepted = True
                break
            mu *= opts.damping_up
            if mu > 1e16:
                break
        if not accepted:
            converged = True  # no descent direction left: local minimum
            break
        rel_dec = (obj - obj_new) / max(obj, 1e-300)
        params = cand
        obj = obj_new
        history.append(obj)
        mu = max(mu * opts.damping_down, 1e-12)
        if rel_dec < opts.rel_tol:
            converged = True
            break

    _, duv = _objective(model, params, observed, opts)
    rms = float(np.sqrt(np.mean(np.sum(duv**2, axis=1))))
    return FitResult(params, rms, iters, converged, history)


# ---------------------------------------------------------------------------
# file formats


def save_morphable(path: str, model: MorphableModel) -> None:
    """JSON header (counts, topology, landmarks) + float32 raw payload
    (mean vertices, identity basis, expression basis)."""
    mesh = model.mean_shape
    header = {
        "V": mesh.num_vertices,
        "K_id": model.num_id,
        "K_exp": model.num_exp,
        "landmark_indices": model.landmark_indices.tolist(),
        "faces": mesh.faces.tolist(),
        "uvs": None if mesh.uvs is None else mesh.uvs.tolist(),
        "name": model.name,
    }
    write_json(path, header)
    write_raw_f32(path + ".raw", [mesh.vertices, model.id_basis, model.exp_basis])


def load_morphable(path: str) -> MorphableModel:
    h = read_json(path)
    v, k_id, k_exp = h["V"], h["K_id"], h["K_exp"]
    mean, id_b, exp_b = read_raw_f32(
        path + ".raw", [(v, 3), (k_id, 3 * v), (k_exp, 3 * v)]
    )
    mesh = TriangleMesh(
        mean, np.array(h["faces"], dtype=np.int64),
        uvs=None if h.get("uvs") is None else np.array(h["uvs"]),
    )
    return MorphableModel(mesh, id_b, exp_b, np.array(h["landmark_indices"]), h.get("name", ""))


def save_fit_params(path: str, params: FitParams) -> None:
    from .io import camera_to_dict

    write_json(
        path,
        {
            "id_coeffs": params.id_coeffs.tolist(),
            "exp_coeffs": params.exp_coeffs.tolist(),
            "rotation": params.pose.rotation.tolist(),
            "translation": params.pose.translation.tolist(),
            "scale": params.pose.scale,
            "camera": camera_to_dict(params.camera),
        },
    )


def load_fit_params(path: str) -> FitParams:
    from .io import camera_from_dict

    d = read_json(path)
    pose = RigidPose(np.array(d["rotation"]), np.array(d["translation"]), d["scale"])
    return FitParams(np.array(d["id_coeffs"]), np.array(d["exp_coeffs"]), pose,
                     camera_from_dict(d["camera"]))


def save_landmarks(path: str, uv: np.ndarray) -> None:
    write_json(path, [[float(u), float(v)] for u, v in np.asarray(uv).reshape(-1, 2)])


def load_landmarks(path: str) -> np.ndarray:
    return np.asarray(read_json(path), dtype=np.float64).reshape(-1, 2)
