"""Command-line front end: ``heinfer <command> ...``.

Exit codes: 0 success, 2 input or format error, 3 key mismatch,
4 homomorphic capacity error (slots, levels or infeasible parameters).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext

from threadpoolctl import threadpool_limits

from . import protocol
from .calibration import MEAN_STD, DomainMethod
from .errors import (
    CapacityError,
    DepthError,
    HeinferError,
    KeyMismatchError,
    ParamsError,
    UnsupportedModelError,
)
from .fileio import atomic_write
from .fixtures import FIXTURE_NAMES, build_fixture, canonical_name
from .harness import agreement_experiment, format_golden, golden_report, mnist_experiment
from .lowering import ReluPolicy
from .tensorfile import TensorSet

EXIT_OK, EXIT_INPUT, EXIT_KEY, EXIT_CAPACITY = 0, 2, 3, 4
THREADS_ENV = "HEINFER_THREADS"


def _domain(text):
    try:
        return DomainMethod.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _degree(text):
    if text.lower() in ("none", "exact"):
        return None
    d = int(text)
    if d not in (1, 3, 7):
        raise argparse.ArgumentTypeError("degree must be 1, 3 or 7")
    return d


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def cmd_keyparams(a):
    kp, side = protocol.keyparams(
        a.model, a.calibration, a.output, backend=a.backend, lambda_bits=a.lambda_bits,
        relu_degree=a.relu_degree, domain_method=a.domain_method, msg_bits=a.msg_bits,
        compose=not a.no_compose, workers=a.workers,
    )
    print(f"wrote {a.output} and {side}", file=sys.stderr)


def cmd_keygen(a):
    seed = a.seed
    if seed is not None and seed.lstrip("-").isdigit():
        seed = int(seed)
    elif seed is not None:
        seed = seed.encode()
    sk, _ = protocol.keygen_files(a.keyparams, a.secret, a.eval, seed)
    print(f"key id {sk.key_id.hex()}", file=sys.stderr)


def cmd_encrypt(a):
    protocol.encrypt_file(a.secret, a.input, a.output)


def cmd_inference(a):
    _emit(protocol.inference(a.model, a.eval, a.input, a.output))


def cmd_decrypt(a):
    y = protocol.decrypt_file(a.secret, a.input, a.output)
    print(f"output shape {tuple(y.shape)}", file=sys.stderr)


def cmd_bench_fixture(a):
    f = build_fixture(a.name, a.seed, a.samples)
    atomic_write(a.output, f.onnx_bytes)
    if a.calibration:
        f.calibration.save(a.calibration)
    if a.input:
        x = f.sample_inputs(1, a.seed + 10_000)[0]
        TensorSet.single(f.input_name, [x]).save(a.input)
    print(f"{f.name}: {f.param_count} parameters", file=sys.stderr)


def _policy(a) -> ReluPolicy:
    if a.backend == "ckks":
        return ReluPolicy(a.relu_degree, a.domain_method or MEAN_STD)
    return ReluPolicy(a.relu_degree, MEAN_STD, tfhe_domain=a.domain_method or protocol.default_domain("tfhe"))


def cmd_bench_run(a):
    results = []
    for name in a.fixture or FIXTURE_NAMES:
        f = build_fixture(name, a.seed)
        res = agreement_experiment(f, a.backend, a.samples, _policy(a), compose=a.compose,
                                   msg_bits=a.msg_bits, seed=a.seed, workers=a.workers)
        results.append(res.to_dict())
    if a.json:
        _emit(results)
    else:
        for r in results:
            print(f"{r['fixture']:26} {r['backend']:5} n={r['samples']:4d} agreement={r['agreement_rate']:.3f} "
                  f"max_rel_err={r['max_rel_error']:.4f} levels={r['levels_consumed']} "
                  f"flushes={r['flushes_per_sample']:.1f} latency={r['latency']['mean_s'] * 1e3:.1f}ms")


def cmd_bench_golden(a):
    rows = golden_report(a.seed)
    if a.json:
        _emit([{"group": r.table, "item": r.item, "computed": r.computed, "published": r.reference,
                "compared": r.compared, "match": r.match} for r in rows])
    else:
        print(format_golden(rows))
    return EXIT_OK if all(r.match for r in rows) else 1


def cmd_bench_mnist(a):
    with open(a.model, "rb") as fh:
        model = fh.read()
    _emit(mnist_experiment(model, a.data_dir, a.backend, a.samples, policy=_policy(a),
                           msg_bits=a.msg_bits, seed=a.seed, workers=a.workers))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heinfer", description="Encrypted inference for ONNX models (simulated HE backends).")
    sub = p.add_subparsers(dest="command", required=True)

    def relu_flags(q):
        q.add_argument("--relu-degree", type=_degree, default=3, help="1, 3 or 7 (CKKS); 'none' for exact ReLU")
        q.add_argument("--domain-method", type=_domain, default=None,
                       help="minmax | meanstd[:k]; default meanstd:3 for ckks, minmax for tfhe")
        q.add_argument("--msg-bits", type=int, default=6, help="TFHE message precision (default 6)")

    q = sub.add_parser("keyparams", help="step 1: calibrate the model and derive encryption parameters")
    q.add_argument("-m", "--model", required=True)
    q.add_argument("-c", "--calibration", required=True, help="calibration tensor archive (.zip)")
    q.add_argument("-o", "--output", required=True, help="keyparams JSON to write")
    q.add_argument("--backend", choices=("ckks", "tfhe"), default="ckks")
    q.add_argument("--lambda", dest="lambda_bits", type=int, choices=(80, 128), default=128)
    q.add_argument("--no-compose", action="store_true", help="keep adjacent linear maps separate")
    q.add_argument("--workers", type=int, default=1)
    relu_flags(q)
    q.set_defaults(func=cmd_keyparams)

    q = sub.add_parser("keygen", help="step 2: generate secret and evaluation keys")
    q.add_argument("-p", "--keyparams", required=True)
    q.add_argument("-s", "--secret", required=True)
    q.add_argument("-e", "--eval", required=True)
    q.add_argument("--seed", default=None, help="reproducible keys (tests only)")
    q.set_defaults(func=cmd_keygen)

    q = sub.add_parser("encrypt", help="step 3: encrypt one input tensor")
    q.add_argument("-s", "--secret", required=True)
    q.add_argument("-i", "--input", required=True)
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_encrypt)

    q = sub.add_parser("inference", help="step 4: evaluate the model on a ciphertext")
    q.add_argument("-m", "--model", required=True, help="ONNX model (its sidecar is found next to it) or the sidecar")
    q.add_argument("-e", "--eval", required=True)
    q.add_argument("-i", "--input", required=True)
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_inference)

    q = sub.add_parser("decrypt", help="step 5: decrypt a result ciphertext")
    q.add_argument("-s", "--secret", required=True)
    q.add_argument("-i", "--input", required=True)
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_decrypt)

    bench = sub.add_parser("bench", help="fixtures, experiments and golden values")
    bsub = bench.add_subparsers(dest="bench_command", required=True)

    q = bsub.add_parser("fixture", help="export a random-weight evaluation network")
    q.add_argument("--name", required=True, type=canonical_name)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--samples", type=int, default=100, help="calibration samples")
    q.add_argument("-o", "--output", required=True)
    q.add_argument("-c", "--calibration", default=None)
    q.add_argument("-i", "--input", default=None, help="also write one fresh input sample")
    q.set_defaults(func=cmd_bench_fixture)

    def exp_flags(q):
        q.add_argument("--backend", choices=("ckks", "tfhe"), default="ckks")
        q.add_argument("--samples", type=int, default=200)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--workers", type=int, default=1)
        relu_flags(q)

    q = bsub.add_parser("run", help="agreement experiment on fixtures")
    q.add_argument("--fixture", action="append", type=canonical_name)
    q.add_argument("--compose", action="store_true")
    q.add_argument("--json", action="store_true")
    exp_flags(q)
    q.set_defaults(func=cmd_bench_run)

    q = bsub.add_parser("golden", help="computed parameters beside published values")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--json", action="store_true")
    q.set_defaults(func=cmd_bench_golden)

    q = bsub.add_parser("mnist", help="optional: trained model + MNIST directory")
    q.add_argument("-m", "--model", required=True)
    q.add_argument("--data-dir", required=True)
    exp_flags(q)
    q.set_defaults(func=cmd_bench_mnist, samples=1000)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, KeyMismatchError):
        return EXIT_KEY
    if isinstance(exc, (CapacityError, DepthError, ParamsError)):
        return EXIT_CAPACITY
    return EXIT_INPUT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get(THREADS_ENV)
    limit = threadpool_limits(int(threads)) if threads and threads.isdigit() else nullcontext()
    try:
        with limit:
            rc = args.func(args)
        return rc or EXIT_OK
    except UnsupportedModelError as exc:
        print(f"error: unsupported model\n{exc.report}", file=sys.stderr)
        return EXIT_INPUT
    except (HeinferError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
