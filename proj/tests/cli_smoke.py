"""End-to-end CLI checks: subcommands, exit codes, determinism, error texts."""

import filecmp
import os
import shutil
import subprocess
import sys
import tempfile

CLI = sys.argv[1]


def run(*args, expect=0):
    proc = subprocess.run([CLI, *args], capture_output=True, text=True)
    if proc.returncode != expect:
        print(f"command {args} exited {proc.returncode}, expected {expect}")
        print(proc.stdout)
        print(proc.stderr)
        sys.exit(1)
    return proc


def check(cond, msg):
    if not cond:
        print("FAILED:", msg)
        sys.exit(1)
    print("ok:", msg)


def trees_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files:
        return False
    (equal, mismatch, errors) = filecmp.cmpfiles(
        a, b, cmp.common_files, shallow=False
    )
    if mismatch or errors:
        return False
    return all(trees_equal(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


def main():
    work = tempfile.mkdtemp(prefix="dc2f_cli_")
    try:
        # --help enumerates subcommands
        help_out = run("--help").stdout
        for sub in ["gen-data", "train", "fuse", "eval", "gradcheck", "selftest"]:
            check(sub in help_out, f"--help lists {sub}")

        # gen-data determinism (byte-identical trees)
        ds1, ds2 = os.path.join(work, "ds1"), os.path.join(work, "ds2")
        run("gen-data", "--out", ds1, "--count", "10", "--size", "16", "--seed", "7")
        run("gen-data", "--out", ds2, "--count", "10", "--size", "16", "--seed", "7")
        check(trees_equal(ds1, ds2), "gen-data is byte-deterministic")
        check(os.path.exists(os.path.join(ds1, "manifest.csv")), "manifest written")

        # invalid size -> data error (exit 3) with greppable reason
        bad = run("gen-data", "--out", os.path.join(work, "bad"), "--count", "10", "--size", "12", expect=3)
        check("size too small" in bad.stderr, "gen-data size error text")

        # train on the tiny toy config; header shows the run hyperparameters
        ckpt = os.path.join(work, "model.dcf")
        toy = ["--set", "patch=1", "--set", "base_embed=8", "--set", "level_channels=8,16,32,64",
               "--set", "heads_per_level=1,2,4,8"]
        proc = run("train", "--data", ds1, "--out", ckpt, "--epochs", "2", "--seed", "3", *toy)
        check("window {2, 2, 2}" in proc.stdout, "train header prints window")
        check("lr 0.0001" in proc.stdout, "train header prints learning rate")
        check("batch 1" in proc.stdout, "train header prints batch size")
        check(os.path.exists(ckpt), "checkpoint written")
        check(os.path.exists(ckpt + ".loss.csv"), "loss log written")

        # --epochs 0 -> usage error (exit 2)
        run("train", "--data", ds1, "--out", ckpt, "--epochs", "0", expect=2)

        # rerun with the same flags -> identical checkpoint bytes
        ckpt2 = os.path.join(work, "model2.dcf")
        run("train", "--data", ds1, "--out", ckpt2, "--epochs", "2", "--seed", "3", *toy)
        with open(ckpt, "rb") as f1, open(ckpt2, "rb") as f2:
            check(f1.read() == f2.read(), "same-flag training is checkpoint-identical")

        # fuse -> valid VOL3 -> eval end to end
        mri = os.path.join(ds1, "train")
        ids = sorted(x[:-9] for x in os.listdir(mri) if x.endswith("_mri.vol3"))
        mri_path = os.path.join(mri, ids[0] + "_mri.vol3")
        pet_path = os.path.join(mri, ids[0] + "_pet.vol3")
        fused = os.path.join(work, "fused.vol3")
        run("fuse", "--ckpt", ckpt, "--mri", mri_path, "--pet", pet_path, "--out", fused)
        report = os.path.join(work, "report.csv")
        run("eval", "--fused", fused, "--mri", mri_path, "--pet", pet_path, "--out", report)
        with open(report) as f:
            lines = [l.strip() for l in f if l.strip()]
        check(lines[0] == "sample,mode,metric,vs_mri,vs_pet,mean", "report header")
        check(len(lines) == 5 and all(",slice2d," in l for l in lines[1:]), "default slice2d rows")

        # volume3d mode emits volume3d rows
        run("eval", "--fused", fused, "--mri", mri_path, "--pet", pet_path, "--mode", "volume3d", "--out", report)
        with open(report) as f:
            lines = [l.strip() for l in f if l.strip()]
        check(all(",volume3d," in l for l in lines[1:]), "volume3d rows")

        # identical inputs -> ssim mean 1
        run("eval", "--fused", mri_path, "--mri", mri_path, "--pet", mri_path, "--out", report)
        with open(report) as f:
            rows = {l.split(",")[2]: l.strip().split(",") for l in f if "," in l and not l.startswith("sample")}
        check(float(rows["ssim"][5]) == 1.0, "identical inputs give ssim mean 1")

        # shape mismatch -> data error with distinct text
        small = os.path.join(work, "small")
        run("gen-data", "--out", small, "--count", "10", "--size", "24", "--seed", "1")
        small_mri = os.path.join(small, "train")
        sid = sorted(x[:-9] for x in os.listdir(small_mri) if x.endswith("_mri.vol3"))[0]
        mismatch = run("fuse", "--ckpt", ckpt, "--mri", os.path.join(small_mri, sid + "_mri.vol3"),
                       "--pet", pet_path, "--out", fused, expect=3)
        check("shape mismatch" in mismatch.stderr, "fuse shape mismatch error text")

        # corrupt checkpoint -> data error mentioning magic
        corrupt = os.path.join(work, "corrupt.dcf")
        with open(corrupt, "wb") as f:
            f.write(b"JUNKJUNKJUNK")
        bad_ck = run("fuse", "--ckpt", corrupt, "--mri", mri_path, "--pet", pet_path, "--out", fused, expect=3)
        check("bad magic" in bad_ck.stderr, "corrupt checkpoint error text")

        # verification commands: pass on a fresh build, fail under fault injection
        gc = run("gradcheck")
        check("ALL CHECKS PASSED" in gc.stdout, "gradcheck passes on a fresh build")
        fault = run("gradcheck", "--inject-backward-fault", expect=4)
        check("numeric error" in fault.stderr, "fault injection is caught with exit 4")
        st = run("selftest")
        check("ALL CHECKS PASSED" in st.stdout, "selftest passes on a fresh build")

        # resume mid-run reproduces the uninterrupted checkpoint bytes
        full_ck = os.path.join(work, "full.dcf")
        run("train", "--data", ds1, "--out", full_ck, "--epochs", "4", "--seed", "5", *toy)
        part_ck = os.path.join(work, "part.dcf")
        run("train", "--data", ds1, "--out", part_ck, "--epochs", "2", "--seed", "5", *toy)
        run("train", "--data", ds1, "--out", part_ck, "--epochs", "4", "--seed", "5", "--resume", *toy)
        with open(full_ck, "rb") as f1, open(part_ck, "rb") as f2:
            check(f1.read() == f2.read(), "resume matches uninterrupted run byte-for-byte")

        print("cli smoke: all checks passed")
    finally:
        shutil.rmtree(work, ignore_errors=True)


if __name__ == "__main__":
    main()
