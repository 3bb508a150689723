"""HTTP service backing the interactive scribble front end.

Single mutable session: one loaded volume, the current seed map, the last
segmentation and the active weights. Reads are served concurrently;
seed updates and segmentation runs take the session lock (a second
segment request while one is running gets 409).

Slice payloads are JSON row-major float arrays (authoritative) with an
optional 8-bit grayscale PNG variant for display (?format=png).
"""

from __future__ import annotations

import io
import threading
import time

import numpy as np
from fastapi import Body, FastAPI, Query, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .errors import SolverError, ValidationError
from .lattice import build_default_bank
from .rw_solver import RWProblem, WeightVector, solve_with_info
from .volume import SeedMap, SoftSegmentation, Volume, normalize_intensities

AXES = {"x": 2, "y": 1, "z": 0}  # axis name -> position in the (nz, ny, nx) grid


class Session:
    def __init__(self, volume: Volume, num_labels: int):
        if num_labels < 2:
            raise ValidationError("need at least 2 labels")
        self.volume = volume
        self.num_labels = num_labels
        self.normalized = normalize_intensities(volume)
        self.bank = None  # built on first segmentation
        self.seeds = SeedMap(num_labels)
        self.segmentation: SoftSegmentation | None = None
        self.weights: WeightVector | None = None
        self.lock = threading.Lock()

    def ensure_bank(self):
        if self.bank is None:
            self.bank = build_default_bank(self.normalized)
        return self.bank


def _slice_2d(grid3: np.ndarray, axis: str, index: int) -> np.ndarray:
    nz, ny, nx = grid3.shape
    limits = {"x": nx, "y": ny, "z": nz}
    if axis not in AXES:
        raise ValidationError(f"axis must be one of x, y, z (got {axis!r})")
    if not (0 <= index < limits[axis]):
        raise ValidationError(f"slice index {index} out of range for axis {axis}")
    if axis == "z":
        return grid3[index, :, :]      # rows y, cols x
    if axis == "y":
        return grid3[:, index, :]      # rows z, cols x
    return grid3[:, :, index]          # rows z, cols y


def _png_response(plane: np.ndarray, lo: float, hi: float) -> Response:
    from PIL import Image

    span = hi - lo
    if span <= 0:
        span = 1.0
    scaled = np.clip((plane - lo) / span, 0.0, 1.0)
    img = Image.fromarray((scaled * 255.0).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return Response(content=buf.getvalue(), media_type="image/png")


def _slice_payload(plane: np.ndarray, axis: str, index: int, fmt: str, lo, hi):
    if fmt == "png":
        return _png_response(plane, lo, hi)
    return {
        "axis": axis,
        "index": index,
        "shape": [int(plane.shape[0]), int(plane.shape[1])],
        "values": [float(v) for v in plane.ravel()],
    }


def create_app(volume: Volume, num_labels: int, ui_dir=None) -> FastAPI:
    app = FastAPI(title="rwseg scribble service")
    session = Session(volume, num_labels)
    app.state.session = session

    @app.exception_handler(RequestValidationError)
    async def malformed_request(request, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(ValidationError)
    async def invalid_values(request, exc):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.get("/api/volume/meta")
    def volume_meta():
        return {
            "dims": list(session.volume.dims),
            "num_labels": session.num_labels,
            "spacing": list(session.volume.spacing),
            "num_seeds": len(session.seeds),
            "has_segmentation": session.segmentation is not None,
        }

    @app.get("/api/volume/slice")
    def volume_slice(
        axis: str = Query(...),
        index: int = Query(...),
        format: str = Query("json"),
    ):
        plane = _slice_2d(session.volume.grid(), axis, index)
        lo = float(session.volume.data.min())
        hi = float(session.volume.data.max())
        return _slice_payload(plane, axis, index, format, lo, hi)

    @app.post("/api/seeds")
    def replace_seeds(body: dict = Body(...)):
        try:
            entries = body["seeds"]
            labels_count = int(body.get("num_labels", session.num_labels))
            indices = np.array([int(e["index"]) for e in entries], dtype=np.int64)
            labels = np.array([int(e["label"]) for e in entries], dtype=np.int64)
        except (KeyError, TypeError, ValueError) as exc:
            return JSONResponse(status_code=400, content={"detail": f"malformed seed document: {exc}"})
        if labels_count != session.num_labels:
            raise ValidationError(
                f"seed map declares {labels_count} labels, session has {session.num_labels}"
            )
        seeds = SeedMap(session.num_labels, indices, labels)
        seeds.validate_for(session.volume.num_voxels)
        with session.lock:
            session.seeds = seeds
        return {"count": len(seeds)}

    @app.get("/api/seeds")
    def get_seeds():
        return {
            "num_labels": session.seeds.num_labels,
            "seeds": [
                {"index": int(i), "label": int(l)}
                for i, l in zip(session.seeds.indices, session.seeds.labels)
            ],
        }

    @app.post("/api/segment")
    def segment(body: dict | None = Body(None)):
        if not session.lock.acquire(blocking=False):
            return JSONResponse(
                status_code=409, content={"detail": "a segmentation is already running"}
            )
        try:
            if len(session.seeds) == 0:
                return JSONResponse(
                    status_code=400, content={"detail": "no seeds committed yet"}
                )
            bank = session.ensure_bank()
            if body and "laplacian_weights" in body:
                weights = WeightVector(
                    np.asarray(body["laplacian_weights"], dtype=np.float64),
                    np.asarray(body.get("prior_weights", []), dtype=np.float64),
                )
            else:
                weights = session.weights or WeightVector(np.ones(len(bank)))
            problem = RWProblem(bank, weights, (), session.seeds, session.num_labels)
            t0 = time.perf_counter()
            seg, info = solve_with_info(problem)
            session.segmentation = seg
            session.weights = weights
            return {
                "status": "ok",
                "seconds": time.perf_counter() - t0,
                "iterations": [int(i) for i in info.iterations],
            }
        except SolverError as exc:
            return JSONResponse(status_code=500, content={"detail": str(exc)})
        finally:
            session.lock.release()

    @app.get("/api/prob/slice")
    def prob_slice(
        label: int = Query(...),
        axis: str = Query(...),
        index: int = Query(...),
        format: str = Query("json"),
    ):
        seg = session.segmentation
        if seg is None:
            return JSONResponse(
                status_code=404, content={"detail": "no segmentation yet"}
            )
        if not (0 <= label < session.num_labels):
            raise ValidationError(f"label {label} out of range")
        nx, ny, nz = seg.dims
        grid3 = seg.probs[:, label].reshape(nz, ny, nx)
        plane = _slice_2d(grid3, axis, index)
        return _slice_payload(plane, axis, index, format, 0.0, 1.0)

    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
