"""Image-file encode/decode composed from the transform, entropy model,
and rANS coder.

Encode: pad the image and quality map by reflection to the transform grid,
run the analysis transform, round both latents, code the side latent with
the learned per-channel prior, derive (mean, sigma) from it, and code the
main latent element-wise. Decode mirrors this exactly; both sides build
their frequency tables from the same deterministic computation, which is
what makes the bitstream a fixed point of parse/serialize.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from . import bitstream, rans
from .bitstream import BitstreamError, Header
from .entropy import hyper_latent_shape, quantize
from .iat import QualityLevel
from .model import CodecModel
from .tensor import Tensor


class CodecError(ValueError):
    pass


# -- image I/O (lossless formats only) ----------------------------------------


def load_image(path) -> np.ndarray:
    """Read a PNG or PPM file to float RGB in [0, 1], shaped (3, H, W)."""
    path = Path(path)
    if path.suffix.lower() not in (".png", ".ppm"):
        raise CodecError(f"unsupported image format '{path.suffix}' (PNG or PPM only)")
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise CodecError(f"unreadable image {path}: {exc}") from exc
    return (arr / 255.0).transpose(2, 0, 1)


def save_image(path, img01: np.ndarray) -> None:
    """Write float (3, H, W) in [0, 1] as 8-bit PNG or PPM, atomically."""
    path = Path(path)
    arr = to_uint8(img01).transpose(1, 2, 0)
    tmp = path.with_name(path.name + ".tmp")
    if path.suffix.lower() == ".ppm":
        h, w = arr.shape[:2]
        with open(tmp, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(arr.tobytes())
    elif path.suffix.lower() == ".png":
        Image.fromarray(arr, mode="RGB").save(tmp, format="PNG")
    else:
        raise CodecError(f"unsupported image format '{path.suffix}' (PNG or PPM only)")
    os.replace(tmp, path)


def to_uint8(img01: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img01 * 255.0), 0, 255).astype(np.uint8)


# -- padding -------------------------------------------------------------------


def pad_to_grid(img: np.ndarray, multiple: int) -> np.ndarray:
    _, h, w = img.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img
    if ph >= h or pw >= w:
        raise CodecError(f"image {h}x{w} too small to pad to a multiple of {multiple}")
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")


# -- entropy coding glue --------------------------------------------------------


def _z_tables(model: CodecModel, shape) -> list[rans.CdfTable]:
    """Per-channel tables for the side latent, replicated across space."""
    mean, sigma = model.z_prior.params_np()
    sigma = rans.bin_sigma(sigma)
    per_channel = [rans.build_cdf(m, s) for m, s in zip(mean, sigma)]
    _, c, h, w = shape
    tables = []
    for ci in range(c):
        tables.extend([per_channel[ci]] * (h * w))
    return tables


def _y_tables(mean: np.ndarray, sigma: np.ndarray) -> list[rans.CdfTable]:
    return rans.build_cdf_tables(mean.reshape(-1), rans.bin_sigma(sigma.reshape(-1)))


def encode_array(model: CodecModel, img01: np.ndarray, qlevel: QualityLevel) -> bytes:
    """Compress a (3, H, W) float image under a quality map of the same size."""
    if img01.ndim != 3 or img01.shape[0] != model.config.image_channels:
        raise CodecError(f"expected ({model.config.image_channels}, H, W) image, got {img01.shape}")
    _, h, w = img01.shape
    if qlevel.shape != (h, w):
        raise CodecError(f"quality map {qlevel.shape} does not match image {h}x{w}")
    grid = model.config.downsample
    padded = pad_to_grid(img01, grid)
    q_padded = qlevel.padded(padded.shape[1], padded.shape[2])

    x = Tensor(padded[None].astype(model.dtype))
    y = model.analysis(x, model.qmap_tensor(q_padded))
    z = model.hyper_a(y)
    z_int = quantize(z.data, "round").astype(np.int64)
    z_payload = rans.rans_encode(z_int.reshape(-1).tolist(), _z_tables(model, z.shape))

    mean, sigma = model.hyper_s(Tensor(z_int.astype(model.dtype)), y.shape[2:])
    y_int = quantize(y.data, "round").astype(np.int64)
    y_payload = rans.rans_encode(y_int.reshape(-1).tolist(), _y_tables(mean.data, sigma.data))

    header = Header(w, h, model.model_hash(), qlevel)
    return bitstream.serialize(header, z_payload, y_payload)


def decode_array(model: CodecModel, data: bytes) -> np.ndarray:
    """Decompress to a (3, H, W) float image in [0, 1]; exact inverse of the
    entropy and header layers, deterministic end to end."""
    header, z_payload, y_payload = bitstream.parse(data)
    if header.model_hash != model.model_hash():
        raise CodecError(
            f"bitstream was produced by model {header.model_hash:016x}, "
            f"loaded model is {model.model_hash():016x}")
    grid = model.config.downsample
    h_pad = header.height + ((-header.height) % grid)
    w_pad = header.width + ((-header.width) % grid)
    q_padded = header.qlevel.padded(h_pad, w_pad)

    latent_hw = (h_pad // grid, w_pad // grid)
    zh, zw = hyper_latent_shape(latent_hw)
    zc = model.config.hyper_channels
    z_shape = (1, zc, zh, zw)
    try:
        z_syms = rans.rans_decode(z_payload, _z_tables(model, z_shape))
    except rans.CoderError as exc:
        raise BitstreamError(f"side payload: {exc}") from exc
    z_int = np.asarray(z_syms, dtype=np.int64).reshape(z_shape)

    mean, sigma = model.hyper_s(Tensor(z_int.astype(model.dtype)), latent_hw)
    try:
        y_syms = rans.rans_decode(y_payload, _y_tables(mean.data, sigma.data))
    except rans.CoderError as exc:
        raise BitstreamError(f"latent payload: {exc}") from exc
    y_int = np.asarray(y_syms, dtype=np.int64).reshape(
        (1, model.config.latent_channels) + latent_hw)

    x_hat = model.synthesis(Tensor(y_int.astype(model.dtype)), model.qmap_tensor(q_padded), clamp=True)
    return x_hat.data[0, :, : header.height, : header.width].astype(np.float64)


# -- file-level API ---------------------------------------------------------------


def parse_qlevel_spec(spec, height: int, width: int) -> QualityLevel:
    """Interpret a CLI quality spec: a number in [0,1], or a map file
    (grayscale PNG levels, or a .npy array of floats in [0,1])."""
    try:
        value = float(spec)
    except (TypeError, ValueError):
        value = None
    if value is not None:
        return QualityLevel.from_scalar(value, height, width)
    path = Path(spec)
    if not path.exists():
        raise CodecError(f"quality spec '{spec}' is neither a number nor a file")
    if path.suffix.lower() == ".npy":
        arr = np.load(path)
        q = QualityLevel.from_map(arr)
    else:
        with Image.open(path) as img:
            levels = np.asarray(img.convert("L"), dtype=np.uint8)
        q = QualityLevel.from_levels(levels)
    if q.shape != (height, width):
        raise CodecError(f"quality map {q.shape} does not match image {height}x{width}")
    return q


def encode_file(model: CodecModel, image_path, out_path, qlevel_spec="0.5") -> dict:
    img = load_image(image_path)
    qlevel = parse_qlevel_spec(qlevel_spec, img.shape[1], img.shape[2])
    data = encode_array(model, img, qlevel)
    out_path = Path(out_path)
    tmp = out_path.with_name(out_path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, out_path)
    n_pixels = img.shape[1] * img.shape[2]
    return {"bytes": len(data), "bpp": len(data) * 8.0 / n_pixels}


def decode_file(model: CodecModel, iatb_path, out_path) -> dict:
    data = Path(iatb_path).read_bytes()
    img = decode_array(model, data)  # raises before anything is written
    save_image(out_path, img)
    return {"width": img.shape[2], "height": img.shape[1]}
