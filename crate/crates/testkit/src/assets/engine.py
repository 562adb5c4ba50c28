#!/usr/bin/env python3
"""Stand-in for a container engine CLI.

Supports `run`, `ps`, `rm`, `kill` and `version`. A container is a process
group started from the translated working directory; its record lives in
STATE/containers/<id>.json until it is removed.
"""
import json
import os
import signal
import subprocess
import sys
import time
import uuid

STATE = os.environ.get("FAKE_ENGINE_STATE") or "@STATE@"
CONTAINERS = os.path.join(STATE, "containers")


def record_path(cid):
    return os.path.join(CONTAINERS, cid + ".json")


def save(rec):
    os.makedirs(CONTAINERS, exist_ok=True)
    tmp = record_path(rec["id"]) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(rec, f)
    os.replace(tmp, record_path(rec["id"]))


def load_all():
    out = []
    if not os.path.isdir(CONTAINERS):
        return out
    for name in sorted(os.listdir(CONTAINERS)):
        if not name.endswith(".json"):
            continue
        try:
            with open(os.path.join(CONTAINERS, name)) as f:
                out.append(json.load(f))
        except (OSError, ValueError):
            pass
    return out


def find(ref):
    for rec in load_all():
        if rec["id"] == ref or rec["id"].startswith(ref) or rec["name"] == ref:
            return rec
    return None


def remove(rec):
    try:
        os.unlink(record_path(rec["id"]))
    except FileNotFoundError:
        pass


def kill_group(pid):
    for target in (-pid, pid):
        try:
            os.kill(target, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass


def flag(name):
    return os.path.exists(os.path.join(STATE, name))


def pull_failures():
    try:
        with open(os.path.join(STATE, "pull-fail")) as f:
            return {l.strip() for l in f if l.strip()}
    except FileNotFoundError:
        return set()


def translate(path, mounts):
    best = None
    for host, inside in mounts:
        if path == inside or path.startswith(inside.rstrip("/") + "/"):
            if best is None or len(inside) > len(best[1]):
                best = (host, inside)
    if best is None:
        return path
    return best[0] + path[len(best[1]):]


def cmd_run(args):
    rm = False
    name = None
    labels = {}
    mounts = []
    workdir = "/"
    env = dict(os.environ)
    i = 0
    while i < len(args):
        a = args[i]
        if a == "--rm":
            rm = True
            i += 1
        elif a in ("--name", "--label", "-v", "-w", "-e"):
            v = args[i + 1]
            i += 2
            if a == "--name":
                name = v
            elif a == "--label":
                k, _, val = v.partition("=")
                labels[k] = val
            elif a == "-v":
                host, _, inside = v.partition(":")
                if not host.startswith("/"):
                    host = os.path.join(STATE, "volumes", host)
                    os.makedirs(host, exist_ok=True)
                mounts.append((host, inside))
            elif a == "-w":
                workdir = v
            else:
                k, _, val = v.partition("=")
                env[k] = val
        elif a.startswith("-"):
            sys.stderr.write("engine: unsupported option %s\n" % a)
            return 125
        else:
            break
    if i >= len(args):
        sys.stderr.write("engine: run needs an image\n")
        return 125
    image = args[i]
    command = args[i + 1:]
    if image in pull_failures() or image.endswith(":missing"):
        sys.stderr.write("Unable to find image '%s' locally\nError: pull access denied for %s\n" % (image, image))
        return 125
    if name and find(name):
        sys.stderr.write("Error: container name %s is already in use\n" % name)
        return 125
    if not command:
        command = ["true"]
    cwd = translate(workdir, mounts)
    command = [translate(c, mounts) if c.startswith("/") else c for c in command]
    cid = uuid.uuid4().hex[:12]
    rec = {
        "id": cid,
        "name": name or cid,
        "image": image,
        "labels": labels,
        "status": "created",
        "pid": None,
        "started": time.time(),
    }
    save(rec)
    try:
        child = subprocess.Popen(command, cwd=cwd, env=env, start_new_session=True)
    except OSError as e:
        sys.stderr.write("engine: cannot start %s: %s\n" % (command[0], e))
        rec["status"] = "exited"
        save(rec)
        return 127

    rec["status"] = "running"
    rec["pid"] = child.pid
    save(rec)

    def forward(signum, _frame):
        kill_group(child.pid)

    signal.signal(signal.SIGTERM, forward)
    signal.signal(signal.SIGINT, forward)
    code = child.wait()
    if code < 0:
        code = 128 - code
    current = find(cid)
    killed = current is not None and current.get("status") == "killed"
    if killed:
        code = 137
    if current is not None:
        current["status"] = "exited"
        current["exit_code"] = code
        if rm and not (killed and flag("keep-killed")):
            remove(current)
        else:
            save(current)
    return code


def cmd_ps(args):
    filters = []
    i = 0
    while i < len(args):
        if args[i] == "--filter":
            filters.append(args[i + 1])
            i += 2
        else:
            i += 1
    for rec in load_all():
        ok = True
        for flt in filters:
            kind, _, rest = flt.partition("=")
            if kind == "label":
                k, _, v = rest.partition("=")
                if rec["labels"].get(k) != v:
                    ok = False
            elif kind == "name":
                if rest not in rec["name"]:
                    ok = False
        if ok:
            print(rec["id"])
    return 0


def cmd_rm(args):
    for ref in [a for a in args if not a.startswith("-")]:
        rec = find(ref)
        if rec is None:
            continue
        if rec.get("pid") and rec.get("status") in ("running", "killed"):
            kill_group(rec["pid"])
        remove(rec)
    return 0


def cmd_kill(args):
    code = 0
    for ref in [a for a in args if not a.startswith("-")]:
        rec = find(ref)
        if rec is None or rec.get("status") != "running":
            sys.stderr.write("Error: no running container %s\n" % ref)
            code = 1
            continue
        rec["status"] = "killed"
        save(rec)
        kill_group(rec["pid"])
    return code


def main():
    os.makedirs(STATE, exist_ok=True)
    argv = sys.argv[1:]
    with open(os.path.join(STATE, "calls.log"), "a") as f:
        f.write(json.dumps(argv) + "\n")
    if not argv:
        sys.stderr.write("usage: engine run|ps|rm|kill|version\n")
        return 2
    sub, rest = argv[0], argv[1:]
    if sub == "run":
        return cmd_run(rest)
    if sub == "ps":
        return cmd_ps(rest)
    if sub == "rm":
        return cmd_rm(rest)
    if sub == "kill":
        return cmd_kill(rest)
    if sub == "version":
        print("fake-engine 1.0")
        return 0
    sys.stderr.write("engine: unknown command %s\n" % sub)
    return 2


if __name__ == "__main__":
    sys.exit(main())
