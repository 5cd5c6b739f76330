"""School label spaces and panel subsetting."""
from typing import List, Tuple
import hashlib
import logging

from src.panel_data import PanelSeries

logger = logging.getLogger(__name__)


def generate_state_labels(n_states: int, fmt: str = "S{:02d}") -> List[str]:
    """State labels S01, S02, ... (format accepts both % and {} styles)."""
    if '%' in fmt:
        return [fmt % i for i in range(1, n_states + 1)]
    return [fmt.format(i) for i in range(1, n_states + 1)]


def generate_school_space(
    n_states: int,
    schools_per_state: int,
    school_fmt: str = "{state}-{k:03d}",
) -> Tuple[List[str], List[int], List[str]]:
    """
    Cartesian product of states and within-state school numbers.

    Args:
        n_states: Number of states
        schools_per_state: Schools in each state
        school_fmt: Template for a school identifier

    Returns:
        (school_ids, state_of, state_labels) in state-major order
    """
    state_labels = generate_state_labels(n_states)
    school_ids: List[str] = []
    state_of: List[int] = []
    for s, state in enumerate(state_labels):
        for k in range(1, schools_per_state + 1):
            school_ids.append(school_fmt.format(state=state, k=k))
            state_of.append(s)
    return school_ids, state_of, state_labels


def school_hash(school_id: str) -> int:
    """Stable hash used for deterministic subsetting."""
    return int(hashlib.md5(school_id.encode()).hexdigest(), 16)


def apply_school_cap(panel: PanelSeries, cap: int, strategy: str = "first_n") -> PanelSeries:
    """
    Restrict a panel to at most `cap` schools.

    Args:
        panel: Full panel
        cap: Maximum number of schools
        strategy: "first_n" keeps panel order, "hash" keeps the smallest md5 hashes

    Returns:
        Subset panel (original row order preserved)
    """
    if cap >= panel.N:
        return panel

    if strategy == "first_n":
        keep = list(range(cap))
    elif strategy == "hash":
        ranked = sorted(range(panel.N), key=lambda i: school_hash(panel.school_ids[i]))
        keep = sorted(ranked[:cap])
    else:
        raise ValueError(f"Unknown sampling strategy: {strategy}")

    logger.info(f"School cap {cap} ({strategy}): keeping {cap} of {panel.N} schools")
    return panel.subset(keep)
