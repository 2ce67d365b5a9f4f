import numpy as np, time
from dataclasses import replace
from ostta_lab.stream import StreamConfig, CorruptionSpec, clean_training_set, sample_batch, CORRUPTION_KINDS
from ostta_lab.model import TinyModel, pretrain, forward
from ostta_lab.harness import (AdaptConfig, adapt_step, make_optimizer, run_episode,
                               run_ablation, run_sweep, run_detector_audit, logit_l1_gap)
from ostta_lab.losses import LossConfig, PrototypeBank

t0 = time.time()
def stamp(msg):
    print(f'[{time.time()-t0:6.0f}s] {msg}', flush=True)

cfg = StreamConfig()
model = TinyModel.create(d_in=cfg.d_in, n_classes=cfg.K, seed=cfg.seed)
log = pretrain(model, clean_training_set(cfg, 64))
stamp(f'clean acc: {log[-1]["accuracy"]:.4f}')

src = run_episode(cfg, AdaptConfig(method='source', lr=1.0, batches_per_corruption=20), model)
stamp(f'source per kind: ' + ' '.join(f'{k}:{r.acc*100:.1f}' for k, r in src.per_corruption.items()))
stamp(f'source mean acc {src.mean.acc*100:.2f} drop {(log[-1]["accuracy"]-src.mean.acc)*100:.2f}')

# C3
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
stamp(f'C3: slope={slope:+.5f} ros_final={traj_r[-1]:.4f} tent_final={traj_t[-1]:.4f}')

# C4
def gap(m, mode):
    probe = m.clone(); idv, oodv = [], []
    for t in range(10):
        b = sample_batch(cfg, t)
        fo = forward(probe, b.inputs, mode)
        l1 = np.abs(fo.logits).sum(1)
        idv.extend(l1[~b.is_ood]); oodv.extend(l1[b.is_ood])
    return float(np.mean(idv) - np.mean(oodv))

m4, _ = one_kind(AdaptConfig(method='rosetta'), 150)
stamp(f'C4: gap0_batch={gap(model, "batch"):+.4f} gap0_run={gap(model, "running"):+.4f} ros_gap={gap(m4, "batch"):+.4f}')

# C5 + episode margin
au = {k: [] for k in ('csid', 'csid+ang', 'csid+ang+norm')}
ac = {k: [] for k in ('csid', 'csid+ang', 'csid+ang+norm')}
for seed in (0, 1, 2):
    scfg = StreamConfig(seed=seed)
    m = TinyModel.create(d_in=scfg.d_in, n_classes=scfg.K, seed=seed)
    pretrain(m, clean_training_set(scfg, 64))
    rows = run_ablation(scfg, AdaptConfig(), m)
    for k in au:
        au[k].append(rows[k].mean.auroc*100); ac[k].append(rows[k].mean.acc*100)
    stamp(f'  C5 seed {seed}: ' + ' | '.join(f'{k} {rows[k].mean.auroc*100:.2f}/{rows[k].mean.acc*100:.2f}' for k in au))
stamp('C5 mean AUROC: ' + ' '.join(f'{k}={np.mean(v):.3f}' for k, v in au.items()))
stamp('C5 mean Acc:   ' + ' '.join(f'{k}={np.mean(v):.3f}' for k, v in ac.items()))

# C6
cells = run_sweep(cfg, AdaptConfig(), model, tau_list=(0.0, 0.25, 0.5, 0.75, 1.0))
taus = {c['tau']: c['report'] for c in cells}
accs = [taus[t].acc*100 for t in (0.0, 0.25, 0.5, 0.75, 1.0)]
aurocs = [taus[t].auroc*100 for t in (0.0, 0.25, 0.5, 0.75, 1.0)]
stamp(f'C6: accs={np.round(accs,3)} span={max(accs)-min(accs):.3f}')
stamp(f'C6: aurocs={np.round(aurocs,3)} delta={aurocs[-1]-aurocs[0]:+.3f}')

# C7
table = run_detector_audit(cfg, model, n_batches=50)
stamp('C7: ' + ' '.join(f'{k}:{row["mean"]*100:.2f}' for k, row in table.items()))
worst_lo = min(v for row in table.values() for v in row.values())
worst_hi = max(v for row in table.values() for v in row.values())
stamp(f'C7 extremes: min={worst_lo*100:.2f} max={worst_hi*100:.2f}')

# C8
oscrs = []
for ratio in (0.2, 0.4, 0.6, 0.8, 1.0):
    rep = run_episode(replace(cfg, ood_ratio=ratio), AdaptConfig(), model)
    oscrs.append(rep.mean.oscr*100)
stamp(f'C8: oscr={np.round(oscrs,3)} spread={max(oscrs)-min(oscrs):.3f}')

# C9
zcfg = replace(cfg, ood_ratio=0.0)
ros0 = run_episode(zcfg, AdaptConfig(), model)
bn0 = run_episode(zcfg, AdaptConfig(method='bn_adapt'), model)
stamp(f'C9: rosetta={ros0.mean.acc*100:.3f} bn={bn0.mean.acc*100:.3f} diff={abs(ros0.mean.acc-bn0.mean.acc)*100:.3f}')

# episode margin at default config, seed 0
tent_ep = run_episode(cfg, AdaptConfig(method='tent_csid_only'), model)
ros_ep = run_episode(cfg, AdaptConfig(), model)
stamp(f'EP margin: tent={tent_ep.mean.auroc*100:.3f} ros={ros_ep.mean.auroc*100:.3f} d={(ros_ep.mean.auroc-tent_ep.mean.auroc)*100:+.3f}')
stamp('done')
