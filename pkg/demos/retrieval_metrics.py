"""
Ranking a gallery and reading CMC / mAP
=======================================

Two queries, six gallery images, 2-D features. One gallery image shares
both identity and camera with the first query and is dropped before ranking.
"""

import numpy as np
from residual_reid.retrieval import rank_all

query = np.array([[0.0, 0.0], [5.0, 5.0]])
gallery = np.array([[0.1, 0.0], [0.0, 0.3], [4.0, 4.0], [5.2, 5.1], [0.5, 0.5], [9.0, 9.0]])
query_ids, gallery_ids = np.array([1, 2]), np.array([1, 1, 2, 2, 3, 1])
query_cams, gallery_cams = np.array([0, 0]), np.array([0, 1, 1, 1, 0, 1])

report = rank_all(query, gallery, query_ids, gallery_ids, query_cams, gallery_cams,
                  exclude_same_camera=True, ranks=(1, 3, 5))

# per-query ranked gallery indices and where the matches landed
for q in report.per_query:
    print(f"query {q.query_index} (id {q.query_id}): order {q.order.tolist()}, "
          f"matches {q.matches.astype(int).tolist()}, AP {q.average_precision:.4f}")

# gallery index 0 is gone from query 0's list: same id and same camera
print()
print(report.table())
