"""Quick end-to-end check of the Python bindings.

Build first:  maturin develop -m crates/python/Cargo.toml --release
"""

import json
import math
import tempfile

import engram_ar_py as ea


def main():
    print(ea.version())

    cfg = ea.Config.toy().with_seed(3)
    cfg.train_size = 64
    cfg.train_steps = 20
    again = ea.Config.from_json(cfg.to_json())
    assert json.loads(again.to_json()) == json.loads(cfg.to_json())

    report = cfg.params()
    assert 0.0 < report["rho"] < 1.0
    sized = cfg.with_target_rho(0.5).params()
    assert abs(sized["rho"] - 0.5) < 0.01, sized

    grids = cfg.generate(0, 4)
    assert grids == cfg.generate(0, 4)
    g = grids[0]
    assert len(g.cells) == g.height * g.width

    fresh = ea.Model(cfg)
    ce = fresh.loss(g)
    assert abs(ce - math.log(64)) < 1.0, ce
    assert fresh.loss(g, gate_clamp=0.0) > 0.0

    model, curve = ea.train(cfg)
    assert curve and curve[-1]["step"] == 19
    assert curve[-1]["train_ce"] < curve[0]["train_ce"]
    s = model.sample(cfg, 1, index=0)
    assert s.class_id == 1 and s == model.sample(cfg, 1, index=0)

    with tempfile.TemporaryDirectory() as d:
        model.save(d)
        back = ea.Model.load(d)
        assert back.loss(g) == model.loss(g)

    sweep = model.gate_clamp_sweep(cfg, cfg.eval_split()[:8])
    assert all(math.isfinite(r["ce"]) for r in sweep["rows"])
    donor = model.donor_probe(cfg, cfg.eval_split()[:2], cfg.train_split())
    assert donor["rows"]
    print("ok: init ce %.3f, %d params, %d clamp rows" % (ce, fresh.num_params, len(sweep["rows"])))


if __name__ == "__main__":
    main()
