"""
Quick start script - generates a small synthetic dataset, trains, evaluates and visualizes
"""

import os
import subprocess
import sys

DATA_ROOT = os.path.join('data', 'quickstart')
RUN_DIR = os.path.join('runs', 'quickstart')
COMMON = f"--config configs/desk.env --data-root {DATA_ROOT} --out {RUN_DIR}"


def run_command(description, command):
    """Run a command and display output"""
    print("\n" + "=" * 70)
    print(f"⚡ {description}")
    print("=" * 70)

    result = subprocess.run(command, shell=True, capture_output=True, text=True)

    if result.stdout:
        print(result.stdout)
    if result.stderr:
        print(result.stderr)

    return result.returncode == 0


def main():
    print("""
    ╔══════════════════════════════════════════════════════════════╗
    ║                                                              ║
    ║      OCCLUDED PROHIBITED ITEM DETECTION - QUICK START        ║
    ║                                                              ║
    ╚══════════════════════════════════════════════════════════════╝
    """)

    print(f"✓ Python version: {sys.version.split()[0]}")

    steps = [
        ("[STEP 1/4] Generating synthetic occluded-tools dataset...",
         "Rendering training and test images",
         f"{sys.executable} cli.py generate-data {COMMON} --seed 0"),
        ("[STEP 2/4] Training detector with attention and hard-sample replay...",
         "Training",
         f"{sys.executable} cli.py train {COMMON} --seed 0 --strategy hard --set use_doam=true --epochs 2"),
        ("[STEP 3/4] Evaluating per occlusion level...",
         "Evaluating",
         f"{sys.executable} cli.py evaluate {COMMON}"),
        ("[STEP 4/4] Exporting attention maps...",
         "Visualizing",
         f"{sys.executable} cli.py viz-attention {COMMON}"),
    ]

    for heading, description, command in steps:
        if heading.startswith("[STEP 1/4]") and os.path.isdir(DATA_ROOT):
            print(f"\n✓ Reusing dataset at {DATA_ROOT}")
            continue
        print("\n" + heading)
        if not run_command(description, command):
            print("❌ Step failed. Please check the error above.")
            return

    print("\n" + "=" * 70)
    print("✅ QUICK START COMPLETE!")
    print("=" * 70)
    print(f"\nArtifacts are in {RUN_DIR}/")
    print("  - checkpoint.joblib, epoch_report.jsonl, metrics.json")
    print("  - eval_report.json, detections.jsonl")
    print("  - attention/*.png")
    print("\nServe the model: DOAM_CHECKPOINT=" + os.path.join(RUN_DIR, 'checkpoint.joblib') + " python app.py")
    print("=" * 70 + "\n")


if __name__ == '__main__':
    main()
