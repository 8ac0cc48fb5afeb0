from .labels import (
    COARSE_LABELS,
    FINE_LABELS,
    NOT_SURE,
    VoteRecord,
    agreement_rate,
    fine_to_coarse,
    label_index,
    majority_vote,
)
from .pisc import PairDataset, PairSample, ParseReport, emit_annotations, parse_pisc
from .sampling import oversample, split_dataset, stratified_batches
from .synth import ClassRule, CueShape, SyntheticSceneSpec, synth_generate, write_synth_dataset
