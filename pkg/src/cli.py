import argparse
import json
import logging
import sys
from pathlib import Path
from urllib.parse import urlparse

from rich.console import Console
from rich.table import Table

from .client import FedorchClient
from .config import settings
from .control_plane.records import ComputeRecord, DatasetRecord
from .exceptions import ApiError, ExpansionError, FedorchError, SpecError
from .expansion import expand
from .logger import logger, log_action
from .tag.parser import parse_job_spec
from .templates import TEMPLATES, diff_templates, template_document
from .validators import pre_check

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_SERVER = 2
EXIT_EXPERIMENT = 3

console = Console()


def _exit_code(error: Exception) -> int:
    if isinstance(error, (SpecError, ExpansionError, ValueError, FileNotFoundError)):
        return EXIT_INVALID
    if isinstance(error, ApiError) and error.status_code in (400, 422):
        return EXIT_INVALID
    return EXIT_SERVER


def _failure(error: Exception) -> dict:
    body = {"success": False, "error": str(error), "exit_code": _exit_code(error)}
    if isinstance(error, FedorchError):
        body["error_code"] = error.error_code
    if isinstance(error, ApiError) and isinstance(error.body, dict) and error.body.get("violations"):
        body["violations"] = error.body["violations"]
    elif isinstance(error, FedorchError) and error.details.get("violations"):
        body["violations"] = error.details["violations"]
    return body


def _read_document(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def _registry(args, client: FedorchClient):
    """Computes and datasets from ``--registry FILE``, else from the control plane"""
    if args.registry:
        body = json.loads(_read_document(args.registry))
        computes, datasets = body.get("computes", []), body.get("datasets", [])
    else:
        computes, datasets = client.list_computes(), client.list_datasets()
    return ([ComputeRecord.model_validate(c) for c in computes],
            [DatasetRecord.model_validate(d) for d in datasets])


# ---- commands ----

def compute_register(args, client: FedorchClient) -> dict:
    compute_id = client.register_compute(args.compute_id, args.realm, args.capacity, args.endpoint)
    return {"success": True, "compute_id": compute_id, "realm": args.realm, "capacity": args.capacity}


def dataset_register(args, client: FedorchClient) -> dict:
    dataset_id = client.register_dataset(args.dataset_id, args.realm, args.url, args.owner,
                                         managed=not args.unmanaged)
    return {"success": True, "dataset_id": dataset_id, "realm": args.realm, "managed": not args.unmanaged}


def job_command(args, client: FedorchClient) -> dict:
    if args.job_command == "create":
        job_id = client.create_job(_read_document(args.spec_file))
        return {"success": True, "job_id": job_id}
    if args.job_command == "start":
        return {"success": True, **client.start_job(args.job_id)}
    if args.job_command == "stop":
        return {"success": True, **client.stop_job(args.job_id)}
    if args.job_command == "status":
        return {"success": True, **client.job_status(args.job_id)}
    return {"success": True, "jobs": client.list_jobs()}


def topology_expand(args, client: FedorchClient) -> dict:
    spec = parse_job_spec(_read_document(args.spec_file))
    report = pre_check(spec)
    if not report.is_empty:
        return {"success": False, "error": f"pre-check failed: {report.summary()}",
                "violations": report.to_list(), "exit_code": EXIT_INVALID}
    computes, datasets = _registry(args, client)
    topology = expand(spec, datasets, computes, job_id=spec.job_name)
    result = {"success": True, "topology": topology.to_document(), "edges": topology.count_edges()}
    if args.emit_dot:
        result["dot"] = topology.to_dot()
    return result


def experiment_run(args) -> dict:
    from .experiments import run_experiment

    options = {"output_root": args.output, "seed": args.seed}
    if args.name != "expansion-overhead":
        options["full_stack"] = args.full_stack
        if args.rounds:
            options["rounds"] = args.rounds
    elif args.sizes:
        options["sizes"] = [int(s) for s in args.sizes.split(",")]
    outcome = run_experiment(args.name, **options)
    result = {"success": outcome.passed, "experiment": outcome.name, "output_dir": outcome.output_dir,
              "checks": outcome.checks}
    if not outcome.passed:
        result["error"] = f"checks failed: {', '.join(outcome.failed_checks())}"
        result["exit_code"] = EXIT_EXPERIMENT
    return result


def template_command(args) -> dict:
    if args.template_command == "show":
        return {"success": True, "template": args.name, "document": template_document(args.name)}
    diff = diff_templates(args.before, args.after)
    return {"success": True, "before": args.before, "after": args.after, **diff.model_dump()}


def serve_control_plane(args):
    import uvicorn

    from .channel.broker_server import BrokerServer
    from .control_plane.api import create_app
    from .control_plane.controller import Controller
    from .control_plane.store import JournaledStore

    broker = urlparse(settings.BROKER_ADDRESS)
    server = BrokerServer(broker.hostname or "127.0.0.1", broker.port or 0).start()
    controller = Controller(JournaledStore(args.state_dir, settings.SNAPSHOT_EVERY),
                            broker_address=server.address)
    log_action(logger, 'SERVER_STARTED', message=f"api=http://{args.host}:{args.port} broker={server.address}")
    try:
        uvicorn.run(create_app(controller), host=args.host, port=args.port, log_level="warning")
    finally:
        server.stop()


def run_deployer(args, client: FedorchClient):
    from .deployer import Deployer, ProcessLauncher

    capacity = args.capacity
    if capacity is None:
        known = {c["compute_id"]: c for c in client.list_computes()}
        capacity = known.get(args.compute_id, {}).get("capacity", 4)
    launcher = ProcessLauncher(log_dir=str(Path(settings.LOG_DIR) / "workers"))
    deployer = Deployer(args.compute_id, client, capacity, launcher, args.work_dir)
    try:
        deployer.serve()
    except KeyboardInterrupt:
        deployer.stop()


def join(args, client: FedorchClient) -> dict:
    from .deployer import ProcessLauncher, join_unmanaged

    result = join_unmanaged(args.job_id, args.worker, client, ProcessLauncher(), args.work_dir,
                            claimant=args.claimant)
    if not result.get("success") and result.get("error_code") != "NO_OPEN_SLOT":
        result.setdefault("exit_code", EXIT_SERVER)
    return result


# ---- output ----

def _print_status(result: dict):
    console.print(f"   Job: {result['job_id']} ({result.get('name', '')})")
    console.print(f"   State: {result['state']}")
    if result.get("error"):
        console.print(f"   Error: {result['error']}")
    table = Table(show_header=True, header_style="bold")
    for column in ("worker", "compute", "status", "exit", "detail"):
        table.add_column(column)
    for worker_id, task in result.get("tasks", {}).items():
        exit_code = "" if task.get("exit_code") is None else str(task["exit_code"])
        table.add_row(worker_id, task["compute_id"], task["status"], exit_code, task.get("detail", ""))
    console.print(table)


def _print_topology(result: dict):
    if "dot" in result:
        print(result["dot"])
        return
    document = result["topology"]
    table = Table(show_header=True, header_style="bold")
    for column in ("worker", "role", "compute", "dataset", "channels"):
        table.add_column(column)
    for w in document["workers"]:
        bindings = ", ".join(f"{c}:{g}" for c, g in w["channel_bindings"].items())
        table.add_row(w["worker_id"], w["role"], w["compute_id"], w.get("dataset_ref") or "", bindings)
    console.print(table)
    console.print(f"   Workers: {len(document['workers'])}  Edges: {result['edges']}")
    for note in document.get("notes", []):
        console.print(f"   Note: {note}")


def _print_result(args, result: dict):
    if args.command == "job" and args.job_command == "status":
        _print_status(result)
    elif args.command == "job" and args.job_command == "list":
        for job in result["jobs"]:
            print(f"   {job['job_id']}  {job['state']}  {job.get('name', '')}")
    elif args.command == "topology":
        _print_topology(result)
    elif args.command == "template" and args.template_command == "show":
        print(json.dumps(result["document"], indent=2))
    elif args.command == "template":
        for section in ("code", "tag", "metadata"):
            print(f"   {section}: {', '.join(result[section]) or '-'}")
    elif args.command == "experiment":
        print(f"   Output: {result['output_dir']}")
        for name, ok in result["checks"].items():
            print(f"   {'✅' if ok else '❌'} {name}")
    else:
        for key, value in result.items():
            if key not in ("success", "agent"):
                print(f"   {key}: {value}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Federated learning orchestration engine")
    parser.add_argument('--api', default=None, help='Control plane URL (defaults to FEDORCH_API)')
    parser.add_argument('--json', action='store_true', help='Print results as JSON')
    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    compute_parser = subparsers.add_parser('compute', help='Manage computes')
    compute_sub = compute_parser.add_subparsers(dest='compute_command')
    register = compute_sub.add_parser('register', help='Register a compute cluster')
    register.add_argument('compute_id')
    register.add_argument('--realm', required=True, help='Realm, e.g. us/west/org1')
    register.add_argument('--capacity', type=int, default=4, help='Concurrent workers')
    register.add_argument('--endpoint', default='', help='Deployer address')

    dataset_parser = subparsers.add_parser('dataset', help='Manage datasets')
    dataset_sub = dataset_parser.add_subparsers(dest='dataset_command')
    register = dataset_sub.add_parser('register', help='Register dataset metadata')
    register.add_argument('dataset_id')
    register.add_argument('--realm', required=True)
    register.add_argument('--url', required=True, help='Data location, e.g. synthetic://...')
    register.add_argument('--owner', default='')
    register.add_argument('--unmanaged', action='store_true', help='Owner joins with their own worker')

    job_parser = subparsers.add_parser('job', help='Manage jobs')
    job_sub = job_parser.add_subparsers(dest='job_command')
    create = job_sub.add_parser('create', help='Submit a job spec file')
    create.add_argument('spec_file')
    for name, help_text in (('start', 'Expand and deploy a job'), ('stop', 'Stop a job'),
                            ('status', 'Show job and task status')):
        sub = job_sub.add_parser(name, help=help_text)
        sub.add_argument('job_id')
    job_sub.add_parser('list', help='List jobs')

    topology_parser = subparsers.add_parser('topology', help='Inspect expansion')
    topology_sub = topology_parser.add_subparsers(dest='topology_command')
    expand_parser = topology_sub.add_parser('expand', help='Expand a spec file without deploying')
    expand_parser.add_argument('spec_file')
    expand_parser.add_argument('--registry', help='JSON file with "computes" and "datasets" lists')
    expand_parser.add_argument('--emit-dot', action='store_true', help='Print the topology as DOT')

    experiment_parser = subparsers.add_parser('experiment', help='Reproduction experiments')
    experiment_sub = experiment_parser.add_subparsers(dest='experiment_command')
    run = experiment_sub.add_parser('run', help='Run an experiment')
    run.add_argument('name', choices=['coordinated-vs-hierarchical', 'hybrid-vs-classical', 'expansion-overhead'])
    run.add_argument('--seed', type=int, default=0)
    run.add_argument('--rounds', type=int, help='Override the number of rounds')
    run.add_argument('--sizes', help='Comma-separated trainer counts (expansion-overhead)')
    run.add_argument('--output', default=settings.ARTIFACT_DIR, help='Output root directory')
    run.add_argument('--full-stack', action='store_true', help='Run workers as OS processes')

    template_parser = subparsers.add_parser('template', help='Topology templates')
    template_sub = template_parser.add_subparsers(dest='template_command')
    show = template_sub.add_parser('show', help='Print a template job spec')
    show.add_argument('name', choices=sorted(TEMPLATES))
    diff = template_sub.add_parser('diff', help='Changes needed to go from one template to another')
    diff.add_argument('before', choices=sorted(TEMPLATES))
    diff.add_argument('after', choices=sorted(TEMPLATES))

    server_parser = subparsers.add_parser('server', help='Run the control plane and broker')
    server_parser.add_argument('--host', default=settings.API_HOST)
    server_parser.add_argument('--port', type=int, default=settings.API_PORT)
    server_parser.add_argument('--state-dir', default=settings.STATE_DIR)

    deployer_parser = subparsers.add_parser('deployer', help='Run the deployer of one compute')
    deployer_parser.add_argument('compute_id')
    deployer_parser.add_argument('--capacity', type=int, help='Defaults to the registered capacity')
    deployer_parser.add_argument('--work-dir', default='work')

    join_parser = subparsers.add_parser('join', help='Run a worker for an unmanaged dataset')
    join_parser.add_argument('job_id')
    join_parser.add_argument('--worker', help='Worker slot; the first open one when omitted')
    join_parser.add_argument('--claimant', default='', help='Who is joining')
    join_parser.add_argument('--work-dir', default='work')
    return parser


def dispatch(args, client: FedorchClient) -> dict:
    if args.command == 'compute' and args.compute_command == 'register':
        return compute_register(args, client)
    if args.command == 'dataset' and args.dataset_command == 'register':
        return dataset_register(args, client)
    if args.command == 'job' and args.job_command:
        return job_command(args, client)
    if args.command == 'topology' and args.topology_command == 'expand':
        return topology_expand(args, client)
    if args.command == 'experiment' and args.experiment_command == 'run':
        return experiment_run(args)
    if args.command == 'template' and args.template_command:
        return template_command(args)
    if args.command == 'join':
        return join(args, client)
    return {"success": False, "error": "unknown command", "exit_code": EXIT_INVALID}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        sys.exit(EXIT_INVALID)

    client = FedorchClient(args.api)
    if args.command == 'server':
        serve_control_plane(args)
        return EXIT_OK
    if args.command == 'deployer':
        run_deployer(args, client)
        return EXIT_OK

    try:
        result = dispatch(args, client)
    except (FedorchError, ValueError, OSError) as e:
        log_action(logger, 'CLI_FAILED', level=logging.ERROR, message=f"{args.command}: {e}")
        result = _failure(e)
    finally:
        client.close()

    if args.json:
        print(json.dumps({k: v for k, v in result.items() if k != "agent"}, indent=2, default=str))
    elif result.get("success"):
        print(f"✅ {args.command} succeeded!")
        _print_result(args, result)
    else:
        print(f"❌ {args.command} failed: {result.get('error', 'Unknown error')}")
        for violation in result.get("violations", []):
            print(f"   {violation['code']}: {violation['subject']} {violation.get('detail', '')}")

    code = EXIT_OK if result.get("success") else result.get("exit_code", EXIT_SERVER)
    if code:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
