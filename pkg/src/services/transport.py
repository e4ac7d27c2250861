"""In-process summary provider: every site engine lives in the coordinator's process."""

import logging
from typing import Dict, List, Optional, Sequence

from src.models.domain import ApproximationMethod, SiteData
from src.models.schemas import ModelConfig, SiteSummary, Theta
from src.pipelines.coordinator import split_site
from src.services.site_engine import SiteEngine

logger = logging.getLogger(__name__)

PARTITIONS = ("train", "validation")


class InProcessTransport:
    """Runs the site computations locally, with the same split and warm-start
    behaviour a remote site agent applies."""

    def __init__(
        self,
        sites: Sequence[SiteData],
        split_ratio: Optional[float] = 0.7,
        split_seed: int = 20211,
        warm_start: bool = True,
    ):
        """Initialize the transport.

        Args:
            sites: One SiteData per site, distinct site_ids, common p
            split_ratio: Training share per site; None keeps every row in train
            split_seed: Seed of the per-site stratified split
            warm_start: Start each mode search at the previous round's mu_hat
        """
        if not sites:
            raise ValueError("At least one site is required")
        ids = [s.site_id for s in sites]
        if len(set(ids)) != len(ids):
            raise ValueError(f"Duplicate site_id in {ids}")
        ps = {s.p for s in sites}
        if len(ps) != 1:
            raise ValueError(f"Sites disagree on the number of covariates: {sorted(ps)}")
        self.p = ps.pop()

        method = ApproximationMethod.laplace()
        self._engines: Dict[str, Dict[int, SiteEngine]] = {name: {} for name in PARTITIONS}
        for site in sorted(sites, key=lambda s: s.site_id):
            if split_ratio is None:
                train, validation = site, None
            else:
                train, validation = split_site(site, split_ratio, split_seed)
            self._engines["train"][site.site_id] = SiteEngine(train, method, warm_start=warm_start)
            if validation is not None:
                self._engines["validation"][site.site_id] = SiteEngine(validation, method, warm_start=warm_start)
        logger.info(
            f"In-process transport with {len(ids)} sites, "
            f"{self.observations('train')} training and {self.observations('validation')} validation rows"
        )

    @classmethod
    def from_model_config(cls, sites: Sequence[SiteData], model_cfg: ModelConfig, warm_start: bool = True):
        return cls(sites, split_ratio=model_cfg.split_ratio, split_seed=model_cfg.split_seed, warm_start=warm_start)

    def site_ids(self) -> List[int]:
        return sorted(self._engines["train"])

    def observations(self, partition: str = "train") -> int:
        return sum(engine.site.n_i for engine in self._partition(partition).values())

    def configure(self, method: ApproximationMethod, lam: float, penalize_intercept: bool) -> None:
        for engines in self._engines.values():
            for engine in engines.values():
                engine.configure(method, lam, penalize_intercept)

    def collect(self, theta: Theta, partition: str = "train") -> List[SiteSummary]:
        engines = self._partition(partition)
        return [engines[site_id].summarize(theta) for site_id in sorted(engines)]

    def _partition(self, partition: str) -> Dict[int, SiteEngine]:
        if partition not in self._engines:
            raise ValueError(f"Unknown partition {partition!r}")
        return self._engines[partition]
