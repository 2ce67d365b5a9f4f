import numpy as np, time
from dataclasses import replace
from ostta_lab.stream import StreamConfig, CorruptionSpec, clean_training_set, sample_batch, CORRUPTION_KINDS
from ostta_lab.model import TinyModel, pretrain, forward
from ostta_lab.harness import (AdaptConfig, adapt_step, make_optimizer, run_episode,
                               run_ablation, run_sweep, run_detector_audit, logit_l1_gap,
                               EVAL_SCORE_KIND)
from ostta_lab.losses import LossConfig, PrototypeBank
from ostta_lab.detectors import score
from ostta_lab.metrics import EpisodeRecord, auroc, accuracy

t0 = time.time()

def stamp(msg):
    print(f'[{time.time()-t0:6.0f}s] {msg}', flush=True)

cfg = StreamConfig()
model = TinyModel.create(d_in=cfg.d_in, n_classes=cfg.K, seed=cfg.seed)
log = pretrain(model, clean_training_set(cfg, 64))
stamp(f'clean acc: {log[-1]["accuracy"]}')

src = run_episode(cfg, AdaptConfig(method='source', lr=1.0, batches_per_corruption=20), model)
stamp(f'source mean acc {src.mean.acc*100:.1f} (drop {(log[-1]["accuracy"]-src.mean.acc)*100:.1f})')

# --- criterion 3: single default-kind 50-batch episodes
def one_kind(acfg, n):
    m = model.clone(); bank = PrototypeBank.from_classifier(m.W_L)
    opt = make_optimizer(acfg.optimizer, acfg.lr, 2*m.d_feat)
    traj = []
    for t in range(n):
        b = sample_batch(cfg, t)
        strep = adapt_step(m, bank, opt, b.inputs, acfg)
        traj.append(float(np.linalg.norm(strep.forward.features[~b.is_ood], axis=1).mean()))
    return m, traj

mt, traj_t = one_kind(AdaptConfig(method='tent_csid_only'), 50)
mr, traj_r = one_kind(AdaptConfig(method='rosetta'), 50)
slope = float(np.polyfit(np.arange(50), traj_t, 1)[0])
stamp(f'C3: tent slope {slope:+.4f} ros_final {traj_r[-1]:.3f} tent_final {traj_t[-1]:.3f} -> {slope > 0 and traj_r[-1] < traj_t[-1]}')

# --- criterion 4: default episode (nb=150), gap vs unadapted
def gap(m, mode):
    probe = m.clone(); idv, oodv = [], []
    for t in range(10):
        b = sample_batch(cfg, t)
        fo = forward(probe, b.inputs, mode)
        l1 = np.abs(fo.logits).sum(1)
        idv.extend(l1[~b.is_ood]); oodv.extend(l1[b.is_ood])
    return float(np.mean(idv) - np.mean(oodv))

m4, _ = one_kind(AdaptConfig(method='rosetta'), 150)
g0b, g0r = gap(model, 'batch'), gap(model, 'running')
g1 = gap(m4, 'batch')
stamp(f'C4: gap0 batch {g0b:+.3f} running {g0r:+.3f}; rosetta gap {g1:+.3f}; ratios {g1/g0b:.2f} / {g1/g0r:.2f}')

# --- criterion 5: ablation, 3 seeds, default config
vals = {m: [] for m in ('csid', 'csid+ang', 'csid+ang+norm')}
accs = {m: [] for m in ('csid', 'csid+ang')}
for seed in (0, 1, 2):
    scfg = replace(cfg, seed=seed)
    m = TinyModel.create(d_in=cfg.d_in, n_classes=cfg.K, seed=seed)
    pretrain(m, clean_training_set(scfg, 64))
    rows = run_ablation(scfg, AdaptConfig(), m)
    for k in vals:
        vals[k].append(rows[k].mean.auroc*100)
    for k in accs:
        accs[k].append(rows[k].mean.acc*100)
    stamp(f'  C5 seed {seed}: ' + ' '.join(f'{k}:{rows[k].mean.auroc*100:.2f}' for k in vals))
means = {k: float(np.mean(v)) for k, v in vals.items()}
acc_means = {k: float(np.mean(v)) for k, v in accs.items()}
stamp(f'C5 mean AUROC {means} acc {acc_means} ordered={means["csid"] < means["csid+ang"] < means["csid+ang+norm"]} accok={acc_means["csid+ang"] >= acc_means["csid"]}')

# --- criterion 6: tau sweep (default adapt config, base seed)
cells = run_sweep(cfg, AdaptConfig(), model, tau_list=(0.0, 0.25, 0.5, 0.75, 1.0))
taus = {c['tau']: c['report'] for c in cells}
acc_span = max(r.acc for r in taus.values())*100 - min(r.acc for r in taus.values())*100
d_auroc = (taus[1.0].auroc - taus[0.0].auroc)*100
stamp(f'C6: acc span {acc_span:.2f} dAUROC {d_auroc:+.2f} accs={[round(taus[t].acc*100,2) for t in (0.0,0.25,0.5,0.75,1.0)]} aurocs={[round(taus[t].auroc*100,2) for t in (0.0,0.25,0.5,0.75,1.0)]}')

# --- criterion 7: detector audit
table = run_detector_audit(cfg, model, n_batches=50)
all_ok = all(0.5 <= v < 1.0 for row in table.values() for v in row.values())
stamp(f'C7: ranges ok={all_ok}; means=' + ' '.join(f'{k}:{row["mean"]*100:.1f}' for k, row in table.items()))

# --- criterion 8: imbalance sweep
oscrs = []
for ratio in (0.2, 0.4, 0.6, 0.8, 1.0):
    rcfg = replace(cfg, ood_ratio=ratio)
    rep = run_episode(rcfg, AdaptConfig(), model)
    oscrs.append(rep.mean.oscr*100)
stamp(f'C8: oscr per ratio {np.round(oscrs,2)} spread {max(oscrs)-min(oscrs):.2f}')

# --- criterion 9: no-OOD robustness
zcfg = replace(cfg, ood_ratio=0.0)
ros0 = run_episode(zcfg, AdaptConfig(), model)
bn0 = run_episode(zcfg, AdaptConfig(method='bn_adapt'), model)
stamp(f'C9: rosetta acc {ros0.mean.acc*100:.2f} bn {bn0.mean.acc*100:.2f} diff {abs(ros0.mean.acc-bn0.mean.acc)*100:.2f}')

# episode example: rosetta AUROC > tent (seed 0, default config)
tent_ep = run_episode(cfg, AdaptConfig(method='tent_csid_only'), model)
ros_ep = run_episode(cfg, AdaptConfig(), model)
stamp(f'EP: tent auroc {tent_ep.mean.auroc*100:.2f} ros {ros_ep.mean.auroc*100:.2f} margin {(ros_ep.mean.auroc-tent_ep.mean.auroc)*100:+.2f}')
stamp('done')
