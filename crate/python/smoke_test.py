#!/usr/bin/env python3
"""Smoke test for the perspnp Python bindings.

Build the extension first (see README), e.g.:

    cargo build -p perspnp-py --release
    cp target/release/libperspnp.so python/perspnp.so
    python3 python/smoke_test.py
"""

import json
import math
import random
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import perspnp


def check(name, condition, detail=""):
    status = "ok" if condition else "FAIL"
    print(f"  {name}: {status} {detail}")
    if not condition:
        sys.exit(1)


def main():
    random.seed(7)
    cam = perspnp.CameraIntrinsics(1000.0, 1000.0, 400.0, 400.0, 800.0, 800.0)

    print("pose round trips")
    pose = perspnp.RigidPose.from_euler(25.0, -10.0, 15.0, (12.0, -8.0, 700.0))
    yaw, pitch, roll = pose.euler()
    check("euler", abs(yaw - 25.0) < 1e-9 and abs(pitch + 10.0) < 1e-9 and abs(roll - 15.0) < 1e-9)
    ident = pose.compose(pose.inverse())
    check("compose/inverse", perspnp.geodesic_distance(ident, perspnp.RigidPose.identity()) < 1e-9)

    print("projection and PnP recovery")
    points = [
        (
            (random.random() - 0.5) * 160.0,
            (random.random() - 0.5) * 180.0,
            (random.random() - 0.5) * 120.0,
        )
        for _ in range(40)
    ]
    landmarks = perspnp.project(points, pose, cam)
    solved, cost, iterations, converged = perspnp.solve_pnp(points, landmarks, cam)
    check(
        "solve_pnp",
        converged and perspnp.geodesic_distance(solved, pose) < 1e-6,
        f"cost={cost:.2e} iters={iterations}",
    )
    check("add at recovery", perspnp.add(solved, pose, points) < 1e-3)

    grads = perspnp.pnp_gradients(points, landmarks, cam, sigmas=[1.0] * len(points))
    check(
        "pnp_gradients shapes",
        len(grads["d_points2"]) == 6 and len(grads["d_points2"][0]) == 2 * len(points),
    )

    print("losses")
    noisy = [(u + random.gauss(0.0, 1.0), v + random.gauss(0.0, 1.0)) for u, v in landmarks]
    value, d_mu, d_s = perspnp.gnll(noisy, [1.0] * len(points), landmarks)
    expected = 0.5 * sum(
        (a - b) ** 2 + (c - d) ** 2 for (a, c), (b, d) in zip(noisy, landmarks)
    )
    check("gnll mse specialization", math.isclose(value, expected, rel_tol=1e-12))

    shifted = [(x + 1.0, y - 2.0, z + 2.0) for x, y, z in points]
    vdc_value, _ = perspnp.vdc(shifted, points)
    check("vdc constant offset", math.isclose(vdc_value, 9.0, rel_tol=1e-12))

    wpdc_value, _ = perspnp.wpdc([1.0, 2.0, 3.0], [0.0, 4.0, 1.0], [1.0, 1.0, 1.0])
    check("wpdc unit weights", math.isclose(wpdc_value, 9.0, rel_tol=1e-12))

    loss_value, d_landmarks, d_mesh, pose_pred = perspnp.pnp_loss(
        landmarks, [1.0] * len(points), points, points, pose, cam
    )
    check("pnp_loss zero at truth", loss_value < 1e-8, f"value={loss_value:.2e}")

    print("PCA shape space")
    base = points
    meshes = [
        [
            (x + random.gauss(0.0, 2.0), y + random.gauss(0.0, 2.0), z + random.gauss(0.0, 2.0))
            for x, y, z in base
        ]
        for _ in range(12)
    ]
    model = perspnp.PcaModel.build(meshes, 8)
    check("model dims", model.k == 8 and model.n_vertices == len(base))
    coeffs = model.fit(meshes[3])
    back = model.reconstruct(coeffs)
    refit = model.fit(back)
    check("fit/reconstruct round trip", max(abs(a - b) for a, b in zip(coeffs, refit)) < 1e-9)

    with tempfile.TemporaryDirectory() as tmp:
        model_path = Path(tmp) / "model.pca"
        model.save(model_path)
        loaded = perspnp.PcaModel.load(model_path)
        check("model file round trip", loaded.k == model.k)

        print("synthetic dataset generation")
        config = {
            "seed": 3,
            "n_vertices": 50,
            "n_shapes": 16,
            "k": 10,
            "n_samples": 5,
            "yaw_range_deg": [-60.0, 60.0],
            "pitch_range_deg": [-40.0, 40.0],
            "roll_range_deg": [-40.0, 40.0],
            "tx_range_mm": [-50.0, 50.0],
            "ty_range_mm": [-50.0, 50.0],
            "tz_range_mm": [300.0, 1200.0],
            "focal_range_px": [600.0, 1600.0],
            "frame_size_px": 800.0,
            "base_sigma_px": 1.0,
            "occlusion_fraction": 0.2,
            "occlusion_sigma_multiplier": 5.0,
        }
        count = perspnp.generate_dataset(json.dumps(config), Path(tmp) / "ds")
        check("generate_dataset", count == 5)

    print("gradient audit (2 instances per op)")
    report = json.loads(perspnp.grad_audit(123, 2))
    check("grad_audit", all(row["pass"] for row in report["rows"]))

    print("smoke test passed")


if __name__ == "__main__":
    main()
