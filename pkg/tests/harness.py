"""Suite-wide experiment runner shared by the acceptance checks.

One pass over the default suite registers every sample with the baseline
and the patch module. Samples in the lowest visibility bin are additionally
registered with the inlier rule, K = 1..6 and noise levels 2 and 4 mm.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from p2preg.benchgen import SuiteConfig, build_sample, suite_specs, with_noise
from p2preg.evaluation import VISIBILITY_EDGES, EvalRecord, assign_bin, procrustes_reference
from p2preg.p2p import P2PConfig
from p2preg.pipeline import DescriptorConfig, evaluate, prepare, run_method

K_SWEEP = (1, 2, 3, 4, 5, 6)
NOISE_LEVELS = (0.0, 2.0, 4.0)


@dataclass
class SuiteRun:
    records: list[EvalRecord] = field(default_factory=list)
    low: dict[str, list[EvalRecord]] = field(default_factory=dict)
    deformation_rms: list[float] = field(default_factory=list)
    procrustes: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def errors(self, method: str, bin_index: int | None = None) -> np.ndarray:
        sel = [r for r in self.records if r.method == method and not r.failed
               and (bin_index is None or assign_bin(r.visibility, VISIBILITY_EDGES) == bin_index)]
        return np.array([r.rms_tre for r in sel])

    def low_errors(self, key: str) -> np.ndarray:
        return np.array([r.rms_tre for r in self.low[key] if not r.failed])


def _record(pair, method, key, **kw) -> EvalRecord:
    rec = evaluate(pair, run_method(pair, method, **kw))
    rec.method = key
    return rec


def run_suite(cfg: SuiteConfig = SuiteConfig(), descriptor: DescriptorConfig = DescriptorConfig(),
              low_extras: bool = True) -> SuiteRun:
    out = SuiteRun()
    t0 = time.perf_counter()
    for spec in suite_specs(cfg):
        sample = build_sample(spec)
        out.deformation_rms.append(float(sample.metadata["deformation_rms"]))
        out.procrustes.append(procrustes_reference(sample.source_fiducials, sample.target_fiducials)[1])
        pair = prepare(sample, descriptor=descriptor)
        base = _record(pair, "baseline", "baseline")
        p2p = _record(pair, "p2p", "p2p")
        out.records += [base, p2p]
        if not low_extras or assign_bin(base.visibility, VISIBILITY_EDGES) != 0:
            continue
        extra = {"baseline@0": base, "p2p@0": p2p, "K5": p2p}
        extra["inlier"] = _record(pair, "p2p", "inlier", p2p=P2PConfig(selection="inlier-count"))
        for K in K_SWEEP:
            if K != 5:
                extra[f"K{K}"] = _record(pair, "p2p", f"K{K}", p2p=P2PConfig(K=K))
        for level in NOISE_LEVELS[1:]:
            noisy = prepare(build_sample(with_noise(spec, level)), descriptor=descriptor)
            extra[f"baseline@{level:g}"] = _record(noisy, "baseline", f"baseline@{level:g}")
            extra[f"p2p@{level:g}"] = _record(noisy, "p2p", f"p2p@{level:g}")
        for k, v in extra.items():
            out.low.setdefault(k, []).append(v)
    out.seconds = time.perf_counter() - t0
    return out
