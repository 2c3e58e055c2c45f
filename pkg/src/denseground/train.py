"""Training loop: one optimizer step per scene, per-epoch validation."""

from __future__ import annotations

import json
import os
import time

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW
from .config import RunConfig, save_config
from .backbone import backbone_loss, neighbor_matrix
from .fusion import grounding_loss, selection_target
from .language import noun_mask_augment, sentence_embedding
from .metrics import evaluate
from .model import GroundingModel, save_model
from .scenes import MASK_ID, load_dataset, target_noun_positions


class TrainingAbort(RuntimeError):
    pass


def _referral_pack(name, scene):
    packed = []
    for ridx, ref in enumerate(scene.referrals):
        packed.append({
            "index": ridx,
            "tokens": list(ref.tokens),
            "noun_positions": target_noun_positions(ref, scene),
            "gt_mask": scene.gt_mask(ref.target_id),
            "camera": ref.camera,
        })
    return packed


def train_scene_step(model: GroundingModel, scene, referrals, rng, train: bool = True,
                     near=None):
    """Build the per-scene loss graph; returns (total Tensor, float components)."""
    cfg = model.config
    feats, candidates, merge_info = model.forward_scene(
        scene.points, scene.colors, instance_id=scene.instance_id, near=near)
    total, parts = backbone_loss(feats, candidates, merge_info, scene,
                                 gamma=cfg.model.gamma, iou_match=cfg.model.iou_match)
    log = {k: float(v.data) for k, v in parts.items()}
    log["grounded"] = 0.0
    if candidates:
        n_ref = 0
        for ref in referrals[:32]:
            tokens = ref["tokens"]
            if train and cfg.loss.noun_mask_prob > 0:
                tokens = noun_mask_augment(tokens, ref["noun_positions"],
                                           cfg.loss.noun_mask_prob, rng, MASK_ID)
            state, enc = model.forward_referral(candidates, tokens)
            target = selection_target([c.mask for c in candidates], ref["gt_mask"])
            e_s = sentence_embedding(enc) if cfg.use_contrastive else None
            g_total, g_parts = grounding_loss(
                state, target, e_s, ref["camera"],
                lambda_con=cfg.loss.lambda_con, lambda_cam=cfg.loss.lambda_cam,
                tau=cfg.loss.tau_con, use_contrastive=cfg.use_contrastive)
            total = ad.add(total, ad.mul(g_total, 1.0 / len(referrals[:32])))
            for key, value in g_parts.items():
                log[key] = log.get(key, 0.0) + float(value.data) / len(referrals[:32])
            n_ref += 1
        log["grounded"] = float(n_ref)
    log["total"] = float(total.data)
    return total, log


def run_validation(model: GroundingModel, val_scenes, use_mve: bool = False, near_cache=None):
    predictions = {}
    for name, scene in val_scenes:
        pc = np.concatenate([scene.points, scene.colors], axis=1)
        near = near_cache.get(name) if near_cache else None
        if near is None:
            near = neighbor_matrix(scene.points, model.config.model.seed_window)
            if near_cache is not None:
                near_cache[name] = near
        for ridx, ref in enumerate(scene.referrals):
            if use_mve:
                predictions[(name, ridx)] = model.predict_ensembled(pc, ref.tokens, near=near)
            else:
                predictions[(name, ridx)] = model.predict(pc, ref.tokens, near=near)
    return evaluate(predictions, val_scenes)


def train_model(config: RunConfig, dataset_dir: str, out_dir: str,
                quiet: bool = False) -> dict:
    """Train on the dataset's train split; checkpoint the best validation model.

    Writes config.json, log.jsonl (one record per epoch), checkpoint.bin and
    loss_curves.png under out_dir. Returns a summary dict.
    """
    os.makedirs(out_dir, exist_ok=True)
    train_scenes, val_scenes = load_dataset(dataset_dir)
    if not train_scenes:
        raise ValueError("dataset has no training scenes")

    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 101]))
    loop_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 202]))
    model = GroundingModel(config, rng=init_rng)
    opt = AdamW(model.parameters(), lr=config.optim.lr,
                betas=(config.optim.beta1, config.optim.beta2),
                eps=config.optim.eps, weight_decay=config.optim.weight_decay)

    packs = {name: _referral_pack(name, scene) for name, scene in train_scenes}
    nears = {name: neighbor_matrix(scene.points, config.model.seed_window)
             for name, scene in train_scenes}
    val_nears: dict = {}
    save_config(config, os.path.join(out_dir, "config.json"))

    history = []
    best = {"acc50": -1.0, "epoch": -1}
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    log_path = os.path.join(out_dir, "log.jsonl")
    step = 0
    with open(log_path, "w", encoding="utf-8") as log_fh:
        for epoch in range(config.epochs):
            t0 = time.time()
            order = loop_rng.permutation(len(train_scenes))
            sums, counts = {}, 0
            for si in order:
                name, scene = train_scenes[si]
                total, log = train_scene_step(model, scene, packs[name], loop_rng,
                                              train=True, near=nears[name])
                if not np.isfinite(log["total"]):
                    dump = {"scene": name, "epoch": epoch, "step": step, "components": log}
                    with open(os.path.join(out_dir, "nan_dump.json"), "w", encoding="utf-8") as fh:
                        json.dump(dump, fh, indent=2, sort_keys=True)
                    raise TrainingAbort(f"non-finite loss on scene {name} at step {step}; "
                                        f"diagnostics in nan_dump.json")
                total.backward()
                opt.step()
                opt.zero_grad()
                step += 1
                counts += 1
                for key, value in log.items():
                    sums[key] = sums.get(key, 0.0) + value

            record = {"epoch": epoch, "step": step,
                      "loss": {k: sums[k] / counts for k in sorted(sums)},
                      "seconds": round(time.time() - t0, 3)}
            if val_scenes and (epoch % config.eval_every == 0 or epoch == config.epochs - 1):
                report = run_validation(model, val_scenes, near_cache=val_nears)
                record["val"] = {
                    "box_acc25": report.box_acc["overall"][0.25],
                    "box_acc50": report.box_acc["overall"][0.5],
                    "mask_acc50": report.mask_acc["overall"][0.5],
                }
                if report.box_acc["overall"][0.5] > best["acc50"]:
                    best = {"acc50": report.box_acc["overall"][0.5], "epoch": epoch}
                    save_model(ckpt_path, model, {
                        "epoch": epoch, "step": step,
                        "val_box_acc50": best["acc50"],
                        "rng_state": json.loads(json.dumps(loop_rng.bit_generator.state)),
                    })
            history.append(record)
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log_fh.flush()
            if not quiet:
                val = record.get("val", {})
                print(f"epoch {epoch:3d}  loss {record['loss'].get('total', 0.0):8.4f}"
                      + (f"  val@50 {val['box_acc50']:.3f}" if val else ""))

    if best["epoch"] < 0:
        save_model(ckpt_path, model, {"epoch": config.epochs - 1, "step": step,
                                      "val_box_acc50": None, "rng_state": None})
    _write_loss_curves(out_dir, history)
    return {"history": history, "best": best, "checkpoint": ckpt_path, "log": log_path}


def _write_loss_curves(out_dir: str, history: list):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r["epoch"] for r in history]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("total", "sem", "cen", "mask", "sel"):
        ys = [r["loss"].get(key) for r in history]
        if any(y is not None for y in ys):
            axes[0].plot(epochs, ys, label=key)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=8)
    axes[0].set_title("training losses")
    val_epochs = [r["epoch"] for r in history if "val" in r]
    for key in ("box_acc25", "box_acc50", "mask_acc50"):
        ys = [r["val"][key] for r in history if "val" in r]
        if ys:
            axes[1].plot(val_epochs, ys, label=key)
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("accuracy")
    axes[1].set_ylim(0, 1.05)
    axes[1].legend(fontsize=8)
    axes[1].set_title("validation accuracy")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "loss_curves.png"), dpi=110)
    plt.close(fig)
