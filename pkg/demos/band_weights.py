"""Print the three band diagnostics around each injected artifact.

    python demos/band_weights.py

Shows why a band was downweighted: the neighbour-correlation deficit, the
second-difference roughness and the log-variance flatness, the combined
robust score s and the resulting weight w.
"""

from ftir_unmix import SynthSpec, default_artifacts, estimate_band_weights, make_scene

spec = SynthSpec()
cube, truth = make_scene(spec, default_artifacts(spec))
bw = estimate_band_weights(cube)
d = bw.diagnostics
kind = dict(truth.artifact_log)

print(f"tau {bw.config.tau}, alpha {bw.config.alpha}, w_min {bw.config.w_min}")
print(f"{'band':>4} {'cm-1':>7} {'d_corr':>8} {'d_rough':>8} {'d_flat':>8} {'s':>8} {'w':>6}  artifact")
shown = sorted({n for b in kind for n in (b - 1, b, b + 1) if 0 <= n < cube.bands})
for b in shown:
    print(f"{b:>4} {cube.wavenumbers[b]:7.1f} {d.d_corr[b]:8.3f} {d.d_rough[b]:8.4f} "
          f"{d.d_flat[b]:8.3f} {d.s[b]:8.2f} {bw.w[b]:6.3f}  {kind.get(b, '')}")
