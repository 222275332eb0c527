#!/usr/bin/env python3
"""Deterministic generator for the bundled molecule corpus.

Builds ~200 small saturated molecules (<= 9 heavy atoms from C/N/O/F plus
explicit hydrogens) with idealized geometry: every bond sits exactly at its
tabulated reference length, so distance-based bond inference recovers the
declared connectivity after hydrogens are stripped.  Every molecule is
verified after an SDF write/parse round trip (coordinates round to 1e-4):

  * declared bonds == bonds inferred from distances (all atoms, and heavy
    subset), using the same one-sided windows as the Rust implementation;
  * every atom valence-exact (summed orders == element valence);
  * one connected component;
  * pairwise distinct by a Weisfeiler-Lehman graph invariant.

Outputs: data/corpus.sdf (full set), data/overfit.sdf (16 small molecules,
<= 6 heavy atoms), data/classes.sdf (8 cyclic + 8 acyclic, <= 6 heavy
atoms).  Everything is seeded; reruns are byte-identical.
"""

import hashlib
import math
import random
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
TABLE_PATH = ROOT / "crates" / "core" / "data" / "elements.txt"
DATA_DIR = ROOT / "data"

BOND_MARGINS = [0.10, 0.05, 0.03]
SAFETY = 0.03  # extra clearance demanded beyond every acceptance window


def load_tables():
    valence = {}
    bond_len = {}
    for line in TABLE_PATH.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        f = line.split()
        if f[0] == "element":
            valence[f[1]] = int(f[3])
        elif f[0] == "bond":
            order, a, b, length = int(f[1]), f[2], f[3], float(f[4])
            bond_len[(order, a, b)] = length
            bond_len[(order, b, a)] = length
    return valence, bond_len


VALENCE, BOND_LEN = load_tables()
HEAVY = ["C", "N", "O", "F"]


def ref_len(order, a, b):
    return BOND_LEN.get((order, a, b))


# --- geometry helpers -------------------------------------------------------

def vsub(a, b):
    return [a[0] - b[0], a[1] - b[1], a[2] - b[2]]


def vadd(a, b):
    return [a[0] + b[0], a[1] + b[1], a[2] + b[2]]


def vscale(a, s):
    return [a[0] * s, a[1] * s, a[2] * s]


def vnorm(a):
    return math.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])


def unit(a):
    n = vnorm(a)
    if n < 1e-12:
        return [1.0, 0.0, 0.0]
    return vscale(a, 1.0 / n)


def dist(a, b):
    return vnorm(vsub(a, b))


SEED_DIRS = [
    [0.5773502691896258, 0.5773502691896258, 0.5773502691896258],
    [0.5773502691896258, -0.5773502691896258, -0.5773502691896258],
    [-0.5773502691896258, 0.5773502691896258, -0.5773502691896258],
    [-0.5773502691896258, -0.5773502691896258, 0.5773502691896258],
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
]


def placement_directions(fixed, count):
    """Directions for new substituents, spread away from `fixed` unit vectors.

    Greedy pick from a deterministic candidate set, then repulsion
    relaxation on the unit sphere (fixed directions do not move).
    """
    if count == 0:
        return []
    chosen = []
    for _ in range(count):
        best, best_score = None, -math.inf
        for cand in SEED_DIRS:
            score = math.inf
            for other in fixed + chosen:
                d = cand[0] * other[0] + cand[1] * other[1] + cand[2] * other[2]
                score = min(score, -max(-1.0, min(1.0, d)))
            if score > best_score:
                best_score, best = score, cand
        chosen.append(list(best))
    for _ in range(300):
        snapshot = [list(c) for c in chosen]
        for idx in range(len(chosen)):
            force = [0.0, 0.0, 0.0]
            for odx, other in enumerate(fixed + snapshot):
                if odx == len(fixed) + idx:
                    continue
                diff = vsub(chosen[idx], other)
                d2 = max(diff[0] ** 2 + diff[1] ** 2 + diff[2] ** 2, 1e-12)
                w = 1.0 / (d2 * math.sqrt(d2))
                force = vadd(force, vscale(diff, w if w < 1e6 else 1e6))
            chosen[idx] = unit(vadd(chosen[idx], vscale(force, 0.05)))
    return chosen


def ring_positions(sides):
    """Planar polygon with exact side lengths, inscribed in a circle."""
    n = len(sides)
    assert n >= 3 and max(sides) < sum(sides) - max(sides)

    def angle_sum(radius):
        return sum(2.0 * math.asin(s / (2.0 * radius)) for s in sides)

    lo = max(sides) / 2.0 + 1e-9
    hi = 100.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if angle_sum(mid) > 2.0 * math.pi:
            lo = mid
        else:
            hi = mid
    radius = 0.5 * (lo + hi)
    theta = 0.0
    pts = []
    for s in sides:
        pts.append([radius * math.cos(theta), radius * math.sin(theta), 0.0])
        theta += 2.0 * math.asin(s / (2.0 * radius))
    return pts


# --- molecule assembly ------------------------------------------------------

class Mol:
    def __init__(self):
        self.atoms = []  # (symbol, [x, y, z])
        self.bonds = []  # (i, j, order)

    def add_atom(self, symbol, pos):
        self.atoms.append((symbol, list(pos)))
        return len(self.atoms) - 1

    def add_bond(self, i, j, order):
        self.bonds.append((i, j, order))

    def neighbor_dirs(self, i):
        pos = self.atoms[i][1]
        dirs = []
        for a, b, _ in self.bonds:
            if a == i:
                dirs.append(unit(vsub(self.atoms[b][1], pos)))
            elif b == i:
                dirs.append(unit(vsub(self.atoms[a][1], pos)))
        return dirs

    def valence_sum(self, i):
        return sum(o for a, b, o in self.bonds if a == i or b == i)

    def attach(self, parent, symbol, order):
        """New atom bonded to `parent` at the exact reference length."""
        length = ref_len(order, self.atoms[parent][0], symbol)
        assert length is not None, (order, self.atoms[parent][0], symbol)
        direction = placement_directions(self.neighbor_dirs(parent), 1)[0]
        pos = vadd(self.atoms[parent][1], vscale(direction, length))
        idx = self.add_atom(symbol, pos)
        self.add_bond(parent, idx, order)
        return idx

    def fill_hydrogens(self):
        for i in range(len(self.atoms)):
            symbol = self.atoms[i][0]
            if symbol == "H":
                continue
            deficit = VALENCE[symbol] - self.valence_sum(i)
            assert deficit >= 0, f"over-valent {symbol} while building"
            if deficit == 0:
                continue
            length = ref_len(1, symbol, "H")
            dirs = placement_directions(self.neighbor_dirs(i), deficit)
            for d in dirs:
                pos = vadd(self.atoms[i][1], vscale(d, length))
                idx = self.add_atom("H", pos)
                self.add_bond(i, idx, 1)

    def recenter(self):
        heavy = [p for s, p in self.atoms if s != "H"]
        if not heavy:
            return
        c = [sum(p[k] for p in heavy) / len(heavy) for k in range(3)]
        for _, p in self.atoms:
            p[0] -= c[0]
            p[1] -= c[1]
            p[2] -= c[2]

    def heavy_count(self):
        return sum(1 for s, _ in self.atoms if s != "H")


def chain_molecule(symbols, orders):
    """Linear heavy-atom chain; hydrogens fill the remaining valence."""
    m = Mol()
    m.add_atom(symbols[0], [0.0, 0.0, 0.0])
    for k in range(1, len(symbols)):
        if ref_len(orders[k - 1], symbols[k - 1], symbols[k]) is None:
            return None
        m.attach(k - 1, symbols[k], orders[k - 1])
    for i, s in enumerate(symbols):
        if m.valence_sum(i) > VALENCE[s]:
            return None
    m.fill_hydrogens()
    return m


def ring_molecule(symbols, orders, substituents=()):
    """Heavy-atom ring, optional (position, symbol, order) substituents."""
    n = len(symbols)
    sides = []
    for k in range(n):
        length = ref_len(orders[k], symbols[k], symbols[(k + 1) % n])
        if length is None:
            return None
        sides.append(length)
    pts = ring_positions(sides)
    m = Mol()
    for s, p in zip(symbols, pts):
        m.add_atom(s, p)
    for k in range(n):
        m.add_bond(k, (k + 1) % n, orders[k])
    for pos, symbol, order in substituents:
        if m.valence_sum(pos) + order > VALENCE[symbols[pos]]:
            return None
        m.attach(pos, symbol, order)
    for i in range(len(m.atoms)):
        if m.valence_sum(i) > VALENCE[m.atoms[i][0]]:
            return None
    m.fill_hydrogens()
    return m


def tree_molecule(rng, n_heavy):
    """Random heavy-atom tree grown by single attachments."""
    m = Mol()
    m.add_atom("C", [0.0, 0.0, 0.0])
    for _ in range(n_heavy - 1):
        sites = [
            i
            for i in range(len(m.atoms))
            if m.atoms[i][0] != "H"
            and VALENCE[m.atoms[i][0]] - m.valence_sum(i) >= 1
        ]
        if not sites:
            return None
        parent = rng.choice(sites)
        parent_budget = VALENCE[m.atoms[parent][0]] - m.valence_sum(parent)
        symbol = rng.choices(HEAVY, weights=[10, 3, 3, 2])[0]
        max_order = min(parent_budget, VALENCE[symbol])
        order = 1
        if max_order >= 2 and rng.random() < 0.15:
            order = 2
        if max_order >= 3 and rng.random() < 0.05:
            order = 3
        if ref_len(order, m.atoms[parent][0], symbol) is None:
            order = 1
        if ref_len(order, m.atoms[parent][0], symbol) is None:
            continue
        m.attach(parent, symbol, order)
    if m.heavy_count() != n_heavy:
        return None
    m.fill_hydrogens()
    return m


# --- verification -----------------------------------------------------------

def infer_bonds(atoms):
    """Port of the distance rule: highest order with d <= ref + margin."""
    bonds = []
    for i in range(len(atoms)):
        for j in range(i + 1, len(atoms)):
            d = dist(atoms[i][1], atoms[j][1])
            for order in (3, 2, 1):
                reference = ref_len(order, atoms[i][0], atoms[j][0])
                if reference is None:
                    continue
                if d <= reference + BOND_MARGINS[order - 1]:
                    bonds.append((i, j, order))
                    break
    return bonds


def margin_clearance(atoms, declared):
    """Slack to each acceptance window: (inside slack for declared bonds,
    outside slack for everything else).  Inside slack only has to absorb the
    1e-4 coordinate rounding; outside slack guards against false positives.
    """
    declared_set = {(min(i, j), max(i, j)): o for i, j, o in declared}
    inside = math.inf
    outside = math.inf
    for i in range(len(atoms)):
        for j in range(i + 1, len(atoms)):
            d = dist(atoms[i][1], atoms[j][1])
            have = declared_set.get((i, j))
            for order in (3, 2, 1):
                reference = ref_len(order, atoms[i][0], atoms[j][0])
                if reference is None:
                    continue
                window = reference + BOND_MARGINS[order - 1]
                if have is not None and order == have:
                    inside = min(inside, window - d)
                elif have is not None and order < have:
                    continue  # shadowed by the accepted higher order
                else:
                    outside = min(outside, d - window)
    return inside, outside


def connected(n, bonds):
    if n == 0:
        return False
    adj = {i: [] for i in range(n)}
    for i, j, _ in bonds:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == n


def wl_invariant(atoms, bonds):
    """Weisfeiler-Lehman refinement hash; equal for isomorphic graphs."""
    n = len(atoms)
    adj = {i: [] for i in range(n)}
    for i, j, o in bonds:
        adj[i].append((j, o))
        adj[j].append((i, o))
    colors = [atoms[i][0] for i in range(n)]
    for _ in range(n):
        colors = [
            hashlib.sha256(
                (colors[i] + "|" + ",".join(sorted(f"{o}:{colors[j]}" for j, o in adj[i]))).encode()
            ).hexdigest()
            for i in range(n)
        ]
    return hashlib.sha256(("#".join(sorted(colors))).encode()).hexdigest()


def has_ring(n, bonds):
    comp = 0
    adj = {i: [] for i in range(n)}
    for i, j, _ in bonds:
        adj[i].append(j)
        adj[j].append(i)
    seen = set()
    for s in range(n):
        if s in seen:
            continue
        comp += 1
        stack = [s]
        seen.add(s)
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
    return len(bonds) + comp > n


def sdf_record(mol, title):
    lines = [title, "  moldiff", ""]
    lines.append(f"{len(mol.atoms):>3}{len(mol.bonds):>3}  0  0  0  0  0  0  0  0999 V2000")
    for symbol, p in mol.atoms:
        lines.append(
            f"{p[0]:>10.4f}{p[1]:>10.4f}{p[2]:>10.4f} {symbol:<3} 0  0  0  0  0  0  0  0  0  0  0  0"
        )
    for i, j, o in mol.bonds:
        lines.append(f"{i + 1:>3}{j + 1:>3}{o:>3}  0  0  0  0")
    lines.append("M  END")
    lines.append("$$$$")
    return "\n".join(lines) + "\n"


def parse_sdf(text):
    """Minimal reader for the records this script writes."""
    mols = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        counts = lines[i + 3]
        na, nb = int(counts[0:3]), int(counts[3:6])
        atoms = []
        for k in range(na):
            ln = lines[i + 4 + k]
            atoms.append(
                (ln[31:34].strip(), [float(ln[0:10]), float(ln[10:20]), float(ln[20:30])])
            )
        bonds = []
        for k in range(nb):
            ln = lines[i + 4 + na + k]
            bonds.append((int(ln[0:3]) - 1, int(ln[3:6]) - 1, int(ln[6:9])))
        mols.append((atoms, bonds))
        j = i + 4 + na + nb
        while j < len(lines) and lines[j].strip() != "$$$$":
            j += 1
        i = j + 1
    return mols


def verify(atoms, bonds):
    """All post-roundtrip invariants; returns None if OK else a reason."""
    n = len(atoms)
    if n == 0:
        return "empty"
    for i in range(n):
        sym = atoms[i][0]
        have = sum(o for a, b, o in bonds if a == i or b == i)
        if have != VALENCE[sym]:
            return f"atom {i} ({sym}) valence {have} != {VALENCE[sym]}"
    if not connected(n, bonds):
        return "disconnected"
    key = lambda bs: sorted((min(i, j), max(i, j), o) for i, j, o in bs)
    if key(infer_bonds(atoms)) != key(bonds):
        return "full-molecule inference mismatch"
    heavy_idx = [i for i in range(n) if atoms[i][0] != "H"]
    remap = {old: new for new, old in enumerate(heavy_idx)}
    heavy_atoms = [atoms[i] for i in heavy_idx]
    heavy_bonds = [
        (remap[i], remap[j], o) for i, j, o in bonds if i in remap and j in remap
    ]
    if key(infer_bonds(heavy_atoms)) != key(heavy_bonds):
        return "heavy-atom inference mismatch"
    inside, outside = margin_clearance(atoms, bonds)
    if inside < 0.005:
        return f"inside slack {inside:.4f}"
    if outside < SAFETY:
        return f"outside slack {outside:.4f}"
    if len(heavy_idx) > 9:
        return "too many heavy atoms"
    return None


# --- catalog ----------------------------------------------------------------

def catalog():
    """Candidate molecules in deterministic order (may exceed the quota)."""
    out = []

    def push(m, kind):
        if m is not None:
            out.append((m, kind))

    # methane and linear alkanes
    push(chain_molecule(["C"], []), "chain")
    for n in range(2, 10):
        push(chain_molecule(["C"] * n, [1] * (n - 1)), "chain")

    # short saturated hetero chains (F only terminal)
    def hetero_chains(length):
        if length == 2:
            seqs = [[a, b] for a in HEAVY for b in HEAVY]
        else:
            interiors = ["C", "N", "O"]
            seqs = []
            for first in HEAVY:
                for last in HEAVY:
                    for mid in _product(interiors, length - 2):
                        seqs.append([first] + list(mid) + [last])
        return seqs

    def _product(pool, k):
        if k == 0:
            yield ()
            return
        for head in pool:
            for tail in _product(pool, k - 1):
                yield (head,) + tail

    for length in (2, 3, 4):
        for seq in hetero_chains(length):
            if all(s == "C" for s in seq):
                continue
            push(chain_molecule(seq, [1] * (length - 1)), "chain")

    # one multiple bond somewhere in a short chain
    for length in (2, 3, 4, 5):
        for pos in range(length - 1):
            for order in (2, 3):
                symbols = ["C"] * length
                orders = [1] * (length - 1)
                orders[pos] = order
                push(chain_molecule(symbols, orders), "chain")
        # terminal carbonyl / nitrile variants
        for tail, order in (("O", 2), ("N", 3)):
            symbols = ["C"] * (length - 1) + [tail]
            orders = [1] * (length - 2) + [order]
            push(chain_molecule(symbols, orders), "chain")

    # plain carbocycles
    for n in range(3, 9):
        push(ring_molecule(["C"] * n, [1] * n), "ring")

    # substituted rings
    for n in range(3, 7):
        for sub, order in (("C", 1), ("F", 1), ("O", 1), ("N", 1), ("O", 2)):
            push(ring_molecule(["C"] * n, [1] * n, [(0, sub, order)]), "ring")

    # one heteroatom in the ring
    for n in range(4, 8):
        for het in ("O", "N"):
            symbols = ["C"] * (n - 1) + [het]
            push(ring_molecule(symbols, [1] * n), "ring")

    # one double bond in the ring
    for n in range(4, 8):
        orders = [1] * n
        orders[0] = 2
        push(ring_molecule(["C"] * n, orders), "ring")

    # double-substituted rings
    for n in range(4, 7):
        push(ring_molecule(["C"] * n, [1] * n, [(0, "C", 1), (2, "C", 1)]), "ring")
        push(ring_molecule(["C"] * n, [1] * n, [(0, "F", 1), (2, "F", 1)]), "ring")

    # random branched trees
    rng = random.Random(20260825)
    for _ in range(260):
        n_heavy = rng.randint(4, 9)
        push(tree_molecule(rng, n_heavy), "tree")

    return out


def main():
    DATA_DIR.mkdir(exist_ok=True)
    accepted = []  # (mol, kind, invariant, record)
    seen = set()
    rejected = {}
    for idx, (mol, kind) in enumerate(catalog()):
        mol.recenter()
        record = sdf_record(mol, f"cand{idx}")
        (atoms, bonds), = parse_sdf(record)
        reason = verify(atoms, bonds)
        if reason is not None:
            rejected[reason] = rejected.get(reason, 0) + 1
            continue
        inv = wl_invariant(atoms, bonds)
        if inv in seen:
            rejected["duplicate"] = rejected.get("duplicate", 0) + 1
            continue
        seen.add(inv)
        accepted.append((mol, kind, inv, (atoms, bonds)))

    assert len(accepted) >= 200, f"only {len(accepted)} molecules survived"
    corpus = accepted[:200]

    def heavy(entry):
        return entry[0].heavy_count()

    def cyclic(entry):
        atoms, bonds = entry[3]
        return has_ring(len(atoms), bonds)

    # overfit subset: small (<= 6 heavy) molecules, a size mix
    small = [e for e in corpus if heavy(e) <= 6]
    small.sort(key=lambda e: (heavy(e), corpus.index(e)))
    overfit = small[:16]
    assert len(overfit) == 16

    cyc = [e for e in corpus if cyclic(e) and heavy(e) <= 6][:8]
    acy = [e for e in corpus if not cyclic(e) and 3 <= heavy(e) <= 6][:8]
    assert len(cyc) == 8 and len(acy) == 8
    classes = cyc + acy

    def write(path, entries, prefix):
        text = "".join(
            sdf_record(m, f"{prefix}{i:03d}") for i, (m, _, _, _) in enumerate(entries)
        )
        path.write_text(text)

    write(DATA_DIR / "corpus.sdf", corpus, "corpus")
    write(DATA_DIR / "overfit.sdf", overfit, "overfit")
    write(DATA_DIR / "classes.sdf", classes, "classes")

    n_cyclic = sum(1 for e in corpus if cyclic(e))
    sizes = {}
    for e in corpus:
        sizes[heavy(e)] = sizes.get(heavy(e), 0) + 1
    print(f"accepted {len(accepted)} candidates, wrote {len(corpus)}")
    print(f"cyclic {n_cyclic}, acyclic {len(corpus) - n_cyclic}")
    print("heavy-atom histogram:", dict(sorted(sizes.items())))
    print("rejections:", dict(sorted(rejected.items())))
    print("classes subset: 8 cyclic + 8 acyclic; overfit subset: 16")


if __name__ == "__main__":
    main()
