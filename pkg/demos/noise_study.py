"""Curvature RMS and normal error versus additive depth noise.

A reduced version of the full sweep (5 trials per level instead of 20),
on a half-resolution camera so it finishes in about a minute.
"""

from quadcurv import core, synth
from quadcurv import evaluation as ev

k = core.DEFAULT_INTRINSICS.scaled(0.5)
scene = synth.sphere_scene()
sigmas = [0, 1, 2, 3, 4, 5]

rows = ev.noise_sweep(["ours", "ours-r", "pca"], sigmas, trials=5, seed=0, scene=scene, k=k)
print(ev.sweep_summary(rows, "sigma", "mm"))

clean, gt = synth.render(scene, k)
print("\nmean normal error in degrees (refined / initial / pca)")
for s in sigmas[1:]:
    frame = ev.Frame(synth.add_noise(clean, synth.NoiseSpec(sigma_mm=s, seed=s)), k)
    refined = ev.normal_angular_error(ev.estimate("ours", frame).normals, gt).mean_deg
    initial = ev.normal_angular_error(frame.initial_normals, gt).mean_deg
    pca = ev.normal_angular_error(ev.estimate("pca", frame).normals, gt).mean_deg
    print(f"sigma={s} mm: {refined:.2f} / {initial:.2f} / {pca:.2f}")
