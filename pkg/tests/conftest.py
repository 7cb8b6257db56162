"""Shared fixtures and the per-criterion acceptance summary."""
from __future__ import annotations

import hashlib
import json
import time
from collections import OrderedDict
from dataclasses import asdict

import pytest

ACCEPTANCE: "OrderedDict[int, dict]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name, budget_s): acceptance criterion id")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    entry = ACCEPTANCE.setdefault(
        n, {"name": marker.args[1], "budget": marker.args[2], "ok": True, "seconds": 0.0, "details": []}
    )
    if rep.when == "call" or rep.failed:
        entry["seconds"] += rep.duration
        if rep.failed:
            entry["ok"] = False
    if rep.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, e in sorted(ACCEPTANCE.items()):
        status = "PASS" if e["ok"] else "FAIL"
        line = f"criterion {n} [{e['name']}]: {status} ({e['seconds']:.1f}s, budget {e['budget']}s)"
        if e["details"]:
            line += " | " + "; ".join(e["details"])
        tr.write_line(line)


# ---------------------------------------------------------------------------
# desk-scale toy setup shared by the slow tests


def _toy_net():
    from gantransfer.backbone import NetworkConfig

    return NetworkConfig(resolution=32, style_dim=64, channel_base=16, channel_max=64, mapping_depth=4)


def _pretrain_cfg():
    from gantransfer.trainer import TransferConfig

    return TransferConfig(total_steps=2000, snapshot_every=500, eval_n_fake=500, seed=0)


@pytest.fixture(scope="session")
def toy_domains(request):
    """The 5000-ellipse / 100-cross pair at 32 px, rendered once per cache."""
    from gantransfer.data import ingest_dataset, make_toy_domains

    root = request.config.cache.mkdir("gantransfer-toys-5000-100-seed7-32")
    if (root / "target" / "00099.png").exists() and (root / "source" / "04999.png").exists():
        return ingest_dataset(root / "source", 32), ingest_dataset(root / "target", 32)
    return make_toy_domains((5000, 100), 7, root, 32)


@pytest.fixture(scope="session")
def pretrained_source(request, toy_domains):
    """2000-step source GAN on the ellipse domain, cached on disk between sessions.

    Returns (snapshot, info) where info holds the FID of the untrained and
    the trained snapshot against the source data.
    """
    from gantransfer import checkpoint
    from gantransfer.backbone import new_snapshot
    from gantransfer.config import to_dict
    from gantransfer.inversion import frozen_random_extractor
    from gantransfer.metrics import evaluate_fid
    from gantransfer.trainer import pretrain

    net, cfg = _toy_net(), _pretrain_cfg()
    src = toy_domains[0]
    key = hashlib.sha256(
        json.dumps({"net": asdict(net), "cfg": to_dict(cfg), "data": src.hash}, sort_keys=True).encode()
    ).hexdigest()[:16]
    root = request.config.cache.mkdir(f"gantransfer-source-{key}")
    ckpt, info_path = root / "source.ckpt", root / "info.json"
    if ckpt.exists() and info_path.exists():
        return checkpoint.load(ckpt), json.loads(info_path.read_text())

    ext = frozen_random_extractor()
    t0 = time.time()
    untrained = evaluate_fid(new_snapshot(net, seed=cfg.seed), src.images, cfg.eval_n_fake, ext).score
    res = pretrain(src.images, net, cfg, extractor=ext)
    info = {
        "untrained_fid": untrained,
        "fid_by_step": {r.snapshot_step: r.score for r in res.reports},
        "final_fid": res.reports[-1].score,
        "seconds": time.time() - t0,
    }
    checkpoint.save(res.snapshot, ckpt)
    info_path.write_text(json.dumps(info, indent=2))
    return checkpoint.load(ckpt), info
