"""Frame-level training sets built from utterances."""

import numpy as np

from .features import splice_context


class FrameData:
    """Spliced network inputs for a list of labelled utterances.

    ``inputs`` is ``N x F x W x C`` (frequency, context window, channels), the
    layout the network consumes. Rows are grouped by utterance in the order
    the utterances were given, and every row knows its utterance id and its
    frame index within that utterance.
    """

    def __init__(self, utterances, context):
        if not utterances:
            raise ValueError("FrameData needs at least one utterance")
        for u in utterances:
            if u.labels is None:
                raise ValueError(f"utterance {u.utterance_id} has no frame labels")
        self.context = context
        self.utterance_ids = [u.utterance_id for u in utterances]
        self.speaker_ids = [u.speaker_id for u in utterances]
        self.nonlocal_rows = utterances[0].nonlocal_rows
        blocks = [splice_context(u.frames, context).transpose(0, 2, 1, 3) for u in utterances]
        self.inputs = np.ascontiguousarray(np.concatenate(blocks, axis=0))
        self.targets = np.concatenate([u.labels for u in utterances])
        lengths = [u.num_frames for u in utterances]
        self.offsets = np.concatenate([[0], np.cumsum(lengths)])
        self.row_utterance = np.repeat(np.array(self.utterance_ids, dtype=object), lengths)
        self.row_frame = np.concatenate([np.arange(n) for n in lengths])

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def input_shape(self):
        return self.inputs.shape[1:]

    def utterance_rows(self, index):
        return np.arange(self.offsets[index], self.offsets[index + 1])

    def rows_for(self, utterance_indices):
        if len(utterance_indices) == 0:
            return np.zeros(0, dtype=int)
        return np.concatenate([self.utterance_rows(i) for i in utterance_indices])

    def utterance_chunks(self, max_rows=2048, utterance_indices=None):
        """Row index arrays made of whole utterances, at most ``max_rows`` each
        (a single longer utterance forms its own chunk)."""
        indices = range(len(self.utterance_ids)) if utterance_indices is None else utterance_indices
        chunk, size = [], 0
        for i in indices:
            n = self.offsets[i + 1] - self.offsets[i]
            if chunk and size + n > max_rows:
                yield np.concatenate(chunk)
                chunk, size = [], 0
            chunk.append(self.utterance_rows(i))
            size += n
        if chunk:
            yield np.concatenate(chunk)
