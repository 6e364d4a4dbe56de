"""Acceptance for the export tool: both artifact flavors convert, pass
probe-scale verification, hold parity within 1e-3 against the reference
runtime on three seeded inputs, and load through the consumer's neural
backend with the scale contract intact."""

import numpy as np

from patchpurify import ImageTensor, NeuralUpscaler

from model_export import export, verify


def report(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_criterion_export_parity(checkpoints, tmp_path):
    details = []
    all_ok = True
    artifacts = {}
    for scale in (4, 2):
        artifact, manifest = export(checkpoints[scale], scale,
                                    tmp_path / f"gen_x{scale}.safetensors")
        artifacts[scale] = artifact
        reports = verify(artifact.path, checkpoints[scale], seeds=(0, 1, 2))
        worst = max(r.max_abs_diff for r in reports)
        ok = manifest.status == "ok" and all(r.passed for r in reports)
        all_ok &= ok
        details.append(f"x{scale}: export {manifest.status}, 3-seed max diff {worst:.2e}")

    backend = NeuralUpscaler([artifacts[4], artifacts[2]])
    img = ImageTensor.from_array(np.random.default_rng(9).uniform(0, 1, (24, 24, 3)))
    contract = (
        backend.supported_factors == frozenset({2, 4})
        and backend.upscale(img, 4).shape == (96, 96, 3)
        and backend.upscale(img, 2).shape == (48, 48, 3)
    )
    all_ok &= contract
    details.append(f"neural backend loads both and honors the scale contract: {contract}")
    report("export parity", all_ok, "; ".join(details))
