#!/usr/bin/env python3
"""Prepare the optional real-model assets used by the last acceptance check.

Produces, under --out (default assets/real/):
  clip_vitb16_visual.safetensors   visual tower in the reference key schema
  voc20_text.safetensors           prompt-ensembled class embeddings [20,512]
  voc20_text.labels.json           the 20 class names
  images/ gts/                     optional Pascal VOC crops (with --voc-root)

Weights come either from a HuggingFace CLIP checkpoint (--model, name or
local directory) or from an OpenAI CLIP state dict saved as a .pt file
(--openai-pt). Both paths need torch; the HF path also needs transformers.

Ground-truth PNGs are remapped to the foreground-only convention: VOC class
k in 1..20 becomes label k-1, background and void both become 255 (ignored).
"""

import argparse
import json
import struct
import sys
from pathlib import Path

import numpy as np

VOC20_CLASSES = [
    "aeroplane", "bicycle", "bird", "boat", "bottle",
    "bus", "car", "cat", "chair", "cow",
    "dining table", "dog", "horse", "motorbike", "person",
    "potted plant", "sheep", "sofa", "train", "tv monitor",
]

PROMPT_TEMPLATES = [
    "a photo of a {}.",
    "a photo of the {}.",
    "a photo of one {}.",
    "a photo of many {}.",
    "a bad photo of a {}.",
    "a cropped photo of a {}.",
    "a bright photo of a {}.",
    "a photo of a small {}.",
    "a photo of a large {}.",
    "itap of a {}.",
]


def write_safetensors(path: Path, tensors: dict, metadata: dict | None = None) -> None:
    header = {}
    if metadata:
        header["__metadata__"] = {k: str(v) for k, v in metadata.items()}
    offset = 0
    payloads = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nbytes = arr.nbytes
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + nbytes],
        }
        payloads.append(arr.tobytes())
        offset += nbytes
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    pad = (8 - len(blob) % 8) % 8
    blob += b" " * pad
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for p in payloads:
            f.write(p)
    print(f"wrote {path} ({len(tensors)} tensors)")


def visual_from_openai_pt(path: str) -> tuple[dict, dict]:
    import torch

    try:
        state = torch.load(path, map_location="cpu")
    except RuntimeError:
        state = torch.jit.load(path, map_location="cpu") # original releases are TorchScript
    if hasattr(state, "state_dict"):
        state = state.state_dict()
    tensors = {
        k: v.float().numpy()
        for k, v in state.items()
        if k.startswith("visual.")
    }
    if "visual.proj" not in tensors:
        raise SystemExit("no visual.proj in the state dict; is this a CLIP checkpoint?")
    width = tensors["visual.conv1.weight"].shape[0]
    return tensors, {"heads": width // 64, "gelu": "quick"}


def visual_from_hf(name: str):
    import torch
    from transformers import CLIPModel

    model = CLIPModel.from_pretrained(name)
    model.eval()
    sd = {k: v.detach().float().numpy() for k, v in model.state_dict().items()}

    def take(key):
        return sd[key]

    out = {
        "visual.class_embedding": take("vision_model.embeddings.class_embedding").reshape(-1),
        "visual.conv1.weight": take("vision_model.embeddings.patch_embedding.weight"),
        "visual.positional_embedding": take("vision_model.embeddings.position_embedding.weight"),
        "visual.ln_pre.weight": take("vision_model.pre_layrnorm.weight"),
        "visual.ln_pre.bias": take("vision_model.pre_layrnorm.bias"),
        "visual.ln_post.weight": take("vision_model.post_layernorm.weight"),
        "visual.ln_post.bias": take("vision_model.post_layernorm.bias"),
        "visual.proj": take("visual_projection.weight").T.copy(),
    }
    layers = model.config.vision_config.num_hidden_layers
    for i in range(layers):
        src = f"vision_model.encoder.layers.{i}."
        dst = f"visual.transformer.resblocks.{i}."
        out[dst + "ln_1.weight"] = take(src + "layer_norm1.weight")
        out[dst + "ln_1.bias"] = take(src + "layer_norm1.bias")
        out[dst + "attn.in_proj_weight"] = np.concatenate(
            [take(src + f"self_attn.{p}_proj.weight") for p in ("q", "k", "v")], axis=0)
        out[dst + "attn.in_proj_bias"] = np.concatenate(
            [take(src + f"self_attn.{p}_proj.bias") for p in ("q", "k", "v")], axis=0)
        out[dst + "attn.out_proj.weight"] = take(src + "self_attn.out_proj.weight")
        out[dst + "attn.out_proj.bias"] = take(src + "self_attn.out_proj.bias")
        out[dst + "ln_2.weight"] = take(src + "layer_norm2.weight")
        out[dst + "ln_2.bias"] = take(src + "layer_norm2.bias")
        out[dst + "mlp.c_fc.weight"] = take(src + "mlp.fc1.weight")
        out[dst + "mlp.c_fc.bias"] = take(src + "mlp.fc1.bias")
        out[dst + "mlp.c_proj.weight"] = take(src + "mlp.fc2.weight")
        out[dst + "mlp.c_proj.bias"] = take(src + "mlp.fc2.bias")

    heads = model.config.vision_config.num_attention_heads
    act = model.config.vision_config.hidden_act
    gelu = "quick" if act in ("quick_gelu",) else "exact"
    return out, {"heads": heads, "gelu": gelu}, model


def text_embeddings_hf(model, name: str) -> np.ndarray:
    import torch
    from transformers import CLIPProcessor

    processor = CLIPProcessor.from_pretrained(name)
    rows = []
    with torch.no_grad():
        for cls in VOC20_CLASSES:
            prompts = [t.format(cls) for t in PROMPT_TEMPLATES]
            batch = processor(text=prompts, return_tensors="pt", padding=True)
            feats = model.get_text_features(**batch)
            feats = feats / feats.norm(dim=-1, keepdim=True)
            mean = feats.mean(dim=0)
            mean = mean / mean.norm()
            rows.append(mean.numpy())
    return np.stack(rows)


def export_voc_images(voc_root: Path, out: Path, count: int) -> None:
    from PIL import Image

    seg_dir = voc_root / "SegmentationClass"
    img_dir = voc_root / "JPEGImages"
    split_file = voc_root / "ImageSets" / "Segmentation" / "val.txt"
    stems = [s.strip() for s in split_file.read_text().splitlines() if s.strip()]
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gts").mkdir(parents=True, exist_ok=True)
    done = 0
    for stem in stems:
        if done >= count:
            break
        gt_path = seg_dir / f"{stem}.png"
        img_path = img_dir / f"{stem}.jpg"
        if not gt_path.exists() or not img_path.exists():
            continue
        gt = np.array(Image.open(gt_path))
        remapped = np.full_like(gt, 255)
        fg = (gt >= 1) & (gt <= 20)
        remapped[fg] = gt[fg] - 1
        if not fg.any():
            continue
        Image.fromarray(remapped, mode="L").save(out / "gts" / f"{stem}.png")
        data = img_path.read_bytes()
        (out / "images" / f"{stem}.jpg").write_bytes(data)
        done += 1
    print(f"copied {done} image/ground-truth pairs")
    if done < 20:
        print("warning: fewer than 20 pairs; the acceptance check will skip", file=sys.stderr)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", default="openai/clip-vit-base-patch16",
                    help="HuggingFace model name or local directory")
    ap.add_argument("--openai-pt", default=None,
                    help="state dict .pt from the original CLIP release (skips transformers)")
    ap.add_argument("--voc-root", default=None,
                    help="VOCdevkit/VOC2012 directory for image/ground-truth export")
    ap.add_argument("--num-images", type=int, default=24)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "assets" / "real"))
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = None
    if args.openai_pt:
        tensors, meta = visual_from_openai_pt(args.openai_pt)
    else:
        tensors, meta, model = visual_from_hf(args.model)
    write_safetensors(out / "clip_vitb16_visual.safetensors", tensors, meta)

    if model is None:
        print("text embeddings need the HF path; rerun with --model to produce them",
              file=sys.stderr)
    else:
        rows = text_embeddings_hf(model, args.model)
        write_safetensors(out / "voc20_text.safetensors", {"text_embeddings": rows})
        (out / "voc20_text.labels.json").write_text(json.dumps(VOC20_CLASSES, indent=2) + "\n")
        print(f"wrote {out / 'voc20_text.labels.json'}")

    if args.voc_root:
        export_voc_images(Path(args.voc_root), out, args.num_images)


if __name__ == "__main__":
    main()
