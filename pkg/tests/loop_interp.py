"""Instruction-at-a-time interpreter for the ten-instruction static loop.

Independent of the package encoder: the loop bytes are spelled out below and
decoded here, with full carry/sign/zero/overflow/parity flag tracking.
"""
from __future__ import annotations

MASK = (1 << 64) - 1

# checksum: ADC RBX,[RSI]; SETS DL; SETP AL; SHL AL,2; OR DL,AL; SHL DL,3;
#           XOR BYTE PTR [$-16],DL; LEA RSI,[RSI+8]; CMP RDI,RSI; JG checksum
LOOP = bytes.fromhex(
    "48131E"        # adc rbx, qword ptr [rsi]
    "0F98C2"        # sets dl
    "0F9AC0"        # setp al
    "C0E002"        # shl al, 2
    "0AD0"          # or dl, al
    "C0E203"        # shl dl, 3
    "3015EAFFFFFF"  # xor byte ptr [rip-22], dl
    "488D7608"      # lea rsi, [rsi+8]
    "4839F7"        # cmp rdi, rsi
    "7FE0"          # jg checksum
)
# entry check ahead of the loop: an empty region skips it (the loop itself
# only tests at the bottom)
ENTRY = bytes.fromhex(
    "4839F7"        # cmp rdi, rsi
    "76" + f"{len(LOOP):02X}"  # jbe past the loop
)
CODE = ENTRY + LOOP
OPCODE_AT = len(ENTRY) + 1  # offset of the mutable opcode byte inside CODE

REG64 = ("rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi")
REG8 = ("al", "cl", "dl", "bl")


def parity_even(b: int) -> int:
    return 1 - (bin(b & 0xFF).count("1") & 1)


class CarrySet(AssertionError):
    pass


class Machine:
    def __init__(self, mem: bytearray, base: int = 0):
        self.mem = mem
        self.base = base  # address of mem[0]
        self.r = dict.fromkeys(REG64, 0)
        self.cf = self.zf = self.sf = self.of = self.pf = 0
        self.steps = 0

    # memory
    def load64(self, addr):
        i = addr - self.base
        return int.from_bytes(self.mem[i:i + 8], "little")

    def load8(self, addr):
        return self.mem[addr - self.base]

    def store8(self, addr, v):
        self.mem[addr - self.base] = v & 0xFF

    # byte registers (low byte of rax..rbx)
    def get8(self, i):
        return self.r[REG64[i]] & 0xFF

    def set8(self, i, v):
        name = REG64[i]
        self.r[name] = (self.r[name] & ~0xFF) | (v & 0xFF)

    def _logic_flags(self, res, bits):
        self.cf = self.of = 0
        self.zf = int(res == 0)
        self.sf = res >> (bits - 1) & 1
        self.pf = parity_even(res)

    def _arith(self, field, dst, src, require_clear_carry):
        a, b = self.r[dst], src
        if field in (2, 3) and require_clear_carry and self.cf:
            raise CarrySet(f"CF=1 entering field {field}")
        if field in (0, 2):  # add / adc
            c = self.cf if field == 2 else 0
            full = a + b + c
            res = full & MASK
            self.cf = int(full > MASK)
            self.of = int(((a ^ res) & (b ^ res)) >> 63 & 1)
        elif field in (3, 5, 7):  # sbb / sub / cmp
            c = self.cf if field == 3 else 0
            full = a - b - c
            res = full & MASK
            self.cf = int(full < 0)
            self.of = int(((a ^ b) & (a ^ res)) >> 63 & 1)
        elif field == 6:
            res = a ^ b
            self.cf = self.of = 0
        elif field == 1:
            res = a | b
            self.cf = self.of = 0
        else:  # 4: and
            res = a & b
            self.cf = self.of = 0
        self.zf = int(res == 0)
        self.sf = res >> 63
        self.pf = parity_even(res)
        if field != 7:
            self.r[dst] = res

    def run(self, entry: int, max_steps: int = 10_000_000, require_clear_carry=True):
        rip = entry
        end = entry + len(CODE)
        while True:
            self.steps += 1
            if self.steps > max_steps:
                raise RuntimeError("step limit")
            b0 = self.load8(rip)
            if b0 == 0x48:
                op = self.load8(rip + 1)
                modrm = self.load8(rip + 2)
                mod, reg, rm = modrm >> 6, modrm >> 3 & 7, modrm & 7
                if op & 0xC7 == 0x03:
                    assert mod == 0 and rm not in (4, 5)
                    self._arith(op >> 3, REG64[reg], self.load64(self.r[REG64[rm]]),
                                require_clear_carry)
                    rip += 3
                elif op == 0x8D:
                    assert mod == 1 and rm != 4
                    disp = int.from_bytes(bytes([self.load8(rip + 3)]), "little", signed=True)
                    self.r[REG64[reg]] = (self.r[REG64[rm]] + disp) & MASK
                    rip += 4
                elif op == 0x39:
                    assert mod == 3
                    self._arith(7, REG64[rm], self.r[REG64[reg]], False)
                    rip += 3
                else:
                    raise NotImplementedError(f"48 {op:02X}")
            elif b0 == 0x0F:
                op = self.load8(rip + 1)
                modrm = self.load8(rip + 2)
                assert modrm >> 6 == 3
                if op == 0x98:
                    v = self.sf
                elif op == 0x9A:
                    v = self.pf
                else:
                    raise NotImplementedError(f"0F {op:02X}")
                self.set8(modrm & 7, v)
                rip += 3
            elif b0 == 0xC0:
                modrm = self.load8(rip + 1)
                assert modrm >> 6 == 3 and (modrm >> 3 & 7) == 4
                n = self.load8(rip + 2) & 31
                v = self.get8(modrm & 7)
                if n:
                    full = v << n
                    res = full & 0xFF
                    self.cf = full >> 8 & 1
                    self.zf = int(res == 0)
                    self.sf = res >> 7
                    self.pf = parity_even(res)
                    self.set8(modrm & 7, res)
                rip += 3
            elif b0 == 0x0A:
                modrm = self.load8(rip + 1)
                assert modrm >> 6 == 3
                res = self.get8(modrm >> 3 & 7) | self.get8(modrm & 7)
                self._logic_flags(res, 8)
                self.set8(modrm >> 3 & 7, res)
                rip += 2
            elif b0 == 0x30:
                modrm = self.load8(rip + 1)
                assert modrm & 0xC7 == 0x05  # rip-relative
                disp = int.from_bytes(self.mem[rip + 2 - self.base:rip + 6 - self.base],
                                      "little", signed=True)
                addr = rip + 6 + disp
                res = self.load8(addr) ^ self.get8(modrm >> 3 & 7)
                self._logic_flags(res, 8)
                self.store8(addr, res)
                rip += 6
            elif b0 == 0x76:
                disp = int.from_bytes(bytes([self.load8(rip + 1)]), "little", signed=True)
                rip += 2
                if self.cf or self.zf:
                    rip += disp
            elif b0 == 0x7F:
                disp = int.from_bytes(bytes([self.load8(rip + 1)]), "little", signed=True)
                rip += 2
                if not self.zf and self.sf == self.of:
                    rip += disp
            else:
                raise NotImplementedError(f"byte {b0:02X} at {rip:#x}")
            if rip == end:
                return


def run_loop(region: bytes, op: int, init_sum: int = 0, code_offset: int | None = None):
    """Run the loop over ``region``; the code either sits after the region or
    at ``code_offset`` inside it (overwriting those bytes).

    Returns ``(sum, op, region_as_run)``, where ``region_as_run`` is the
    region's starting image including the planted code bytes.
    """
    field = op | 2
    code = bytearray(CODE)
    code[OPCODE_AT] = 0x03 + (field << 3)
    mem = bytearray(region)
    if code_offset is None:
        code_at = len(mem) + 64
        mem += bytes(64) + code
    else:
        mem[code_offset:code_offset + len(code)] = code
        code_at = code_offset
    start_image = bytes(mem[:len(region)])
    m = Machine(mem)
    m.r["rsi"] = 0  # region begins at address 0
    m.r["rdi"] = len(region)
    m.r["rbx"] = init_sum
    m.cf = 0  # the prologue's CLC
    m.run(code_at)
    final = (mem[code_at + OPCODE_AT] >> 3) & 5
    return m.r["rbx"], final, start_image
