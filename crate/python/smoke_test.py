"""Smoke test for the soupforge Python bindings.

Build and install first:  pip install ./crates/python   (or maturin develop)
"""
import math
import tempfile
from pathlib import Path

import soupforge as sf


def main():
    train, val, test = sf.generate_dataset(seed=3, n_train=240, n_val=120, n_test=120)
    assert len(val) == 120 and val.dim == 8

    with tempfile.TemporaryDirectory() as tmp:
        manifest, spec = sf.build_pool(Path(tmp) / "pool", train, seed=3, k=6)
        store = sf.CheckpointStore.open(manifest)
        assert len(store) == 6

        uniform = sf.run_soup("uniform", store, spec, val)
        for col in zip(*uniform.effective):
            assert abs(sum(col) - 1.0) < 1e-12

        greedy = sf.run_soup("greedy", store, spec, val)
        best = max(spec.evaluate(store.load(i), val)[1] for i in range(1, 7))
        assert spec.evaluate(greedy.soup, val)[1] >= best

        store.set_ceiling(2 + 3)
        store.reset_peak()
        mehl = sf.run_soup("mehl-plus", store, spec, val, model_batch=2, outer_iters=3, inner_iters=20)
        assert store.peak_resident <= 5
        assert len(mehl.trace) == 3 and len(mehl.blocks) == 3
        for col in zip(*mehl.effective):
            assert abs(sum(col) - 1.0) < 1e-12
        loss, acc = spec.evaluate(mehl.soup, test)
        assert math.isfinite(loss) and 0.0 <= acc <= 1.0

        path = Path(tmp) / "soup.soup"
        sf.write_checkpoint(path, spec, mehl.soup)
        layers, params = sf.read_checkpoint(path)
        assert layers == spec.layers() and params == mehl.soup

        raw = bytearray(path.read_bytes())
        raw[-5] ^= 0x40
        path.write_bytes(bytes(raw))
        try:
            sf.read_checkpoint(path)
        except ValueError as e:
            assert "CRC" in str(e)
        else:
            raise AssertionError("corruption not detected")

    assert sf.sample_block(8, 3, 7, 1) == sorted(sf.sample_block(8, 3, 7, 1))
    assert "mehl-plus" in sf.soup_methods()
    print(f"soupforge {sf.__version__}: smoke test ok (mehl-plus test acc {acc:.3f})")


if __name__ == "__main__":
    main()
