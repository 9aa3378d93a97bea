#ifndef NPF_TASK_HPP
#define NPF_TASK_HPP

#include <vector>

#include "npf/tensor.hpp"

namespace npf {

// One batch of meta-learning tasks, padded to a common point count. Context
// and target masks are disjoint 0/1 indicators over the points; rows beyond a
// task's point count carry zeros in both masks (and zero padding in x/y).
struct TaskBatch {
  Tensor x;         // [B, n, d_x]
  Tensor y;         // [B, n, d_y]
  Tensor ctx_mask;  // [B, n]
  Tensor tgt_mask;  // [B, n]

  i64 batch_size() const { return x.extent(0); }
  i64 n_points() const { return x.extent(1); }
  i64 d_x() const { return x.extent(2); }
  i64 d_y() const { return y.extent(2); }

  i64 context_count(i64 b) const {
    i64 c = 0;
    for (i64 j = 0; j < n_points(); ++j) c += ctx_mask.at(b * n_points() + j) > 0.5 ? 1 : 0;
    return c;
  }
  i64 target_count(i64 b) const {
    i64 c = 0;
    for (i64 j = 0; j < n_points(); ++j) c += tgt_mask.at(b * n_points() + j) > 0.5 ? 1 : 0;
    return c;
  }
  std::vector<i64> context_indices(i64 b) const {
    std::vector<i64> idx;
    for (i64 j = 0; j < n_points(); ++j)
      if (ctx_mask.at(b * n_points() + j) > 0.5) idx.push_back(j);
    return idx;
  }
};

}  // namespace npf

#endif
