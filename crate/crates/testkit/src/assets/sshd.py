#!/usr/bin/env python3
"""Minimal SSH server for tests: public-key auth, exec requests only."""
import argparse
import asyncio
import os
import signal
import sys

import asyncssh


async def pump(src, dst):
    while True:
        data = await src.read(65536)
        if not data:
            break
        dst.write(data)
        drain = getattr(dst, "drain", None)
        if drain is not None:
            await drain()


async def feed(process, proc):
    try:
        while True:
            data = await process.stdin.read(65536)
            if not data:
                break
            proc.stdin.write(data)
            await proc.stdin.drain()
    except (asyncssh.Error, BrokenPipeError, ConnectionResetError, asyncio.CancelledError):
        pass
    finally:
        try:
            proc.stdin.close()
        except Exception:
            pass


async def handle(process):
    command = process.command
    if not command:
        process.stderr.write(b"interactive sessions are not supported\n")
        process.exit(1)
        return
    proc = await asyncio.create_subprocess_exec(
        "/bin/sh", "-c", command,
        stdin=asyncio.subprocess.PIPE,
        stdout=asyncio.subprocess.PIPE,
        stderr=asyncio.subprocess.PIPE,
        start_new_session=True,
    )
    feeder = asyncio.ensure_future(feed(process, proc))
    try:
        await asyncio.gather(pump(proc.stdout, process.stdout), pump(proc.stderr, process.stderr))
        code = await proc.wait()
    except (asyncssh.Error, BrokenPipeError, ConnectionResetError):
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        code = await proc.wait()
    feeder.cancel()
    if code < 0:
        code = 128 - code
    try:
        process.exit(code)
    except Exception:
        pass


async def main():
    p = argparse.ArgumentParser()
    p.add_argument("--host-key", required=True)
    p.add_argument("--authorized", required=True)
    p.add_argument("--port-file", required=True)
    p.add_argument("--port", type=int, default=0)
    a = p.parse_args()
    server = await asyncssh.create_server(
        asyncssh.SSHServer,
        "127.0.0.1",
        a.port,
        server_host_keys=[a.host_key],
        authorized_client_keys=a.authorized,
        process_factory=handle,
        encoding=None,
        keepalive_interval=0,
    )
    port = server.sockets[0].getsockname()[1]
    tmp = a.port_file + ".tmp"
    with open(tmp, "w") as f:
        f.write(str(port))
    os.replace(tmp, a.port_file)
    await asyncio.Event().wait()


if __name__ == "__main__":
    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        sys.exit(0)
