#pragma once

// Independent scalar re-implementation of the forward pass, written directly
// from the architecture description with nested vectors and no shared kernels.
// Used as an oracle for the optimized model code.

#include <span>
#include <vector>

#include "bilm/model.hpp"

namespace bilm::testing {

using Matrix = std::vector<std::vector<double>>;

struct ReferenceTrace {
  Matrix logits;                // [position][vocab]
  std::vector<Matrix> hidden;   // [layer 0..L][position][d_hidden]
};

ReferenceTrace reference_forward(const model::ModelState& state, std::span<const int> tokens);

// log softmax(logits[p - 1])[tokens[p]] summed over p in [start, end), via log-sum-exp.
double reference_logprob(const Matrix& logits, std::span<const int> tokens, int start, int end);

}  // namespace bilm::testing
