"""Adapt merging coefficients by entropy descent, without labels.

The bundled two-task suite pairs one checkpoint that actually classifies
the test distribution with one that is pure noise. Descending the mean
prediction entropy over the merging coefficients should discover that
asymmetry: the useful checkpoint's coefficients rise, the noise
checkpoint's fall. The second half does the same descent while also
learning binary masks over each delta's singular values.
"""

from rankmerge import (
    adapt_coefficients,
    adarank_adapt,
    build_task_vectors,
    signal_noise_suite,
    weight_average,
)


def main() -> None:
    suite = signal_noise_suite(seed=0)
    tvs = build_task_vectors(weight_average(suite.finetuned), suite.finetuned)

    table, history = adapt_coefficients(tvs, suite.template, [suite.batch], steps=60, lr=0.05)
    print("entropy trajectory (every 10th step):")
    for step, entropy, mean_lambda in history[::10]:
        print(f"  step {step:>3}  entropy {entropy:.4f}  mean coefficient {mean_lambda:.3f}")

    means = table.task_means()
    print(f"\nper-task coefficient means: signal={means[0]:.3f}, noise={means[1]:.3f}")
    print("per-(task, layer) table:", table.as_mapping())

    masks, _, mask_history = adarank_adapt(
        tvs, suite.template, [suite.batch], init_k=4, steps=40, lr=0.05
    )
    print(f"\njoint mask + coefficient descent: entropy "
          f"{mask_history[0][1]:.4f} -> {mask_history[-1][1]:.4f}")
    for (task, layer), mask in sorted(masks.items()):
        print(f"  task {task} {layer}: {mask.retained}/{len(mask.logits)} singular values kept")


if __name__ == "__main__":
    main()
