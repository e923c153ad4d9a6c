"""Self-modifying-code machine-clear counter through Linux perf_event_open.

Only the user-mode OS interface is used; the MSR addresses in the event specs
are reference data and are never written.
"""
from __future__ import annotations

import ctypes
import ctypes.util
import errno
import fcntl
import os
import platform
import struct
from dataclasses import dataclass, field

from .errors import PermissionDenied, UnknownVendor, Unsupported

PERF_TYPE_RAW = 4
PERF_EVENT_IOC_ENABLE = 0x2400
PERF_EVENT_IOC_DISABLE = 0x2401
PERF_EVENT_IOC_RESET = 0x2403
_NR_PERF_EVENT_OPEN = {"x86_64": 298, "aarch64": 241}

# attr.flags bits
_DISABLED = 1 << 0
_EXCLUDE_KERNEL = 1 << 5
_EXCLUDE_HV = 1 << 6

PARANOID_PATH = "/proc/sys/kernel/perf_event_paranoid"
PARANOID_HINT = (f"lower {PARANOID_PATH} (e.g. sysctl kernel.perf_event_paranoid=1) "
                 "or grant CAP_PERFMON")


@dataclass(frozen=True)
class SmcEventSpec:
    vendor: str
    event_code: int
    umask: int
    name: str
    msrs: dict = field(default_factory=dict, compare=False)

    @property
    def raw_config(self) -> int:
        return (self.umask << 8) | self.event_code


INTEL_SMC = SmcEventSpec(
    "Intel", 0xC3, 0x04, "MACHINE_CLEARS.SMC",
    {"IA32_PERF_GLOBAL_CTRL": 0x38F, "IA32_PERFEVTSEL0": 0x186, "IA32_PMC0": 0xC1})
AMD_SMC = SmcEventSpec(
    "AMD", 0x21, 0x00, "LS_SMC_PIPELINE_RESTART",
    {"PERF_CTL_GLOBAL": 0xC0000301, "PERF_CTL0": 0xC0010000, "PERF_CTR0": 0xC0010004})

_VENDORS = {
    "intel": INTEL_SMC, "genuineintel": INTEL_SMC,
    "amd": AMD_SMC, "authenticamd": AMD_SMC,
}


def event_spec(vendor: str) -> SmcEventSpec:
    """Accepts a short name (``Intel``) or the CPUID vendor string."""
    try:
        return _VENDORS[vendor.strip().lower()]
    except KeyError:
        raise UnknownVendor(f"no SMC event known for vendor {vendor!r}") from None


class _Attr(ctypes.Structure):
    _fields_ = [
        ("type", ctypes.c_uint32),
        ("size", ctypes.c_uint32),
        ("config", ctypes.c_uint64),
        ("sample_period", ctypes.c_uint64),
        ("sample_type", ctypes.c_uint64),
        ("read_format", ctypes.c_uint64),
        ("flags", ctypes.c_uint64),
        ("wakeup_events", ctypes.c_uint32),
        ("bp_type", ctypes.c_uint32),
        ("config1", ctypes.c_uint64),
        ("config2", ctypes.c_uint64),
        ("_pad", ctypes.c_uint8 * 56),
    ]


_libc = ctypes.CDLL(ctypes.util.find_library("c") or None, use_errno=True)
_libc.syscall.restype = ctypes.c_long


def paranoid_level() -> int | None:
    try:
        with open(PARANOID_PATH) as f:
            return int(f.read().strip())
    except (OSError, ValueError):
        return None


class Counter:
    """One raw hardware counter for the calling thread, user mode only."""

    def __init__(self, fd: int, spec: SmcEventSpec):
        self.fd = fd
        self.spec = spec

    def read(self) -> int:
        if self.fd < 0:
            raise ValueError("counter is closed")
        return struct.unpack("<Q", os.read(self.fd, 8))[0]

    def enable(self):
        fcntl.ioctl(self.fd, PERF_EVENT_IOC_ENABLE, 0)

    def disable(self):
        fcntl.ioctl(self.fd, PERF_EVENT_IOC_DISABLE, 0)

    def reset(self):
        fcntl.ioctl(self.fd, PERF_EVENT_IOC_RESET, 0)

    def close(self):
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_counter(spec: SmcEventSpec, enabled: bool = True) -> Counter:
    nr = _NR_PERF_EVENT_OPEN.get(platform.machine().lower())
    if nr is None:
        raise Unsupported(f"perf_event_open is not wired up for {platform.machine()}")
    attr = _Attr()
    attr.type = PERF_TYPE_RAW
    attr.size = ctypes.sizeof(_Attr)
    attr.config = spec.raw_config
    attr.flags = _EXCLUDE_KERNEL | _EXCLUDE_HV | (0 if enabled else _DISABLED)
    # pid 0 / cpu -1: this thread, any CPU
    fd = _libc.syscall(nr, ctypes.byref(attr), 0, -1, -1, 0)
    if fd < 0:
        err = ctypes.get_errno()
        msg = f"perf_event_open({spec.name}): {os.strerror(err)}"
        if err in (errno.EACCES, errno.EPERM):
            raise PermissionDenied(f"{msg}; {PARANOID_HINT}")
        if err in (errno.ENOENT, errno.ENODEV, errno.EOPNOTSUPP, errno.EINVAL, errno.ENOSYS):
            raise Unsupported(f"{msg}; no usable hardware PMU (virtual machine?)")
        raise OSError(err, msg)
    return Counter(fd, spec)


def read(counter: Counter) -> int:
    return counter.read()


def close(counter: Counter) -> None:
    counter.close()


def count_events(spec: SmcEventSpec, workload, runs: int = 1) -> int:
    """Events raised by ``runs`` calls of ``workload``."""
    with open_counter(spec, enabled=False) as c:
        c.reset()
        c.enable()
        for _ in range(runs):
            workload()
        c.disable()
        return c.read()


def host_spec() -> SmcEventSpec:
    from .cpu import detect_cpu
    return event_spec(detect_cpu().vendor)
