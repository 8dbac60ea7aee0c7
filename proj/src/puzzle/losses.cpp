// Copyright 2026 The Puzzle NAS Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "puzzle/losses.hpp"

#include <cmath>

namespace puzzle {

double BldLoss(const Matrix& o_parent, const Matrix& o_child, Matrix* d_child) {
  Require(o_parent.rows() == o_child.rows() && o_parent.cols() == o_child.cols(),
          ErrorCode::kShapeMismatch, "BLD loss: shape mismatch");
  const double denom = o_parent.squaredNorm();
  Require(denom > 0.0, ErrorCode::kDegenerate, "degenerate parent output");
  const Matrix diff = o_child - o_parent;
  if (d_child != nullptr) *d_child = (2.0 / denom) * diff;
  // The element count cancels between numerator and denominator.
  return diff.squaredNorm() / denom;
}

double LmLoss(const Matrix& logits, const std::vector<int>& targets,
              Matrix* d_logits) {
  const Eigen::Index rows = static_cast<Eigen::Index>(targets.size());
  Require(rows >= 1 && rows <= logits.rows(), ErrorCode::kShapeMismatch,
          "LM loss: need 1..rows targets");
  if (d_logits != nullptr) *d_logits = Matrix::Zero(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index t = 0; t < rows; ++t) {
    const int y = targets[t];
    Require(y >= 0 && y < logits.cols(), ErrorCode::kOutOfRange,
            "LM loss: target out of range");
    const double mx = logits.row(t).maxCoeff();
    const double lse = mx + std::log((logits.row(t).array() - mx).exp().sum());
    total += lse - logits(t, y);
    if (d_logits != nullptr) {
      d_logits->row(t) = (logits.row(t).array() - lse).exp().matrix() / rows;
      (*d_logits)(t, y) -= 1.0 / rows;
    }
  }
  return total / rows;
}

double CosineLoss(const std::vector<Matrix>& child_hidden,
                  const std::vector<Matrix>& parent_hidden,
                  std::vector<Matrix>* d_child, int* degenerate) {
  Require(child_hidden.size() == parent_hidden.size(), ErrorCode::kShapeMismatch,
          "cosine loss: layer counts differ");
  if (d_child != nullptr) d_child->clear();
  int bad = 0;
  double total = 0.0;
  for (std::size_t l = 0; l < child_hidden.size(); ++l) {
    const Matrix& hc = child_hidden[l];
    const Matrix& hp = parent_hidden[l];
    Require(hc.rows() == hp.rows() && hc.cols() == hp.cols() && hc.rows() > 0,
            ErrorCode::kShapeMismatch, "cosine loss: hidden shape mismatch");
    const double inv_t = 1.0 / static_cast<double>(hc.rows());
    Matrix grad = Matrix::Zero(hc.rows(), hc.cols());
    double layer_sum = 0.0;
    for (Eigen::Index t = 0; t < hc.rows(); ++t) {
      const double nc = hc.row(t).norm();
      const double np = hp.row(t).norm();
      if (nc == 0.0 || np == 0.0) {
        ++bad;
        layer_sum += 1.0;
        continue;
      }
      // 1 - cos as half the squared distance of the unit vectors: exact zero
      // for identical states and no cancellation near cos = 1.
      const double one_minus = 0.5 * (hc.row(t) / nc - hp.row(t) / np).squaredNorm();
      const double cosv = 1.0 - one_minus;
      layer_sum += one_minus;
      grad.row(t) =
          -inv_t * (hp.row(t) / (nc * np) - cosv * hc.row(t) / (nc * nc));
    }
    total += layer_sum * inv_t;
    if (d_child != nullptr) d_child->push_back(std::move(grad));
  }
  if (degenerate != nullptr) *degenerate = bad;
  return total;
}

double KldLoss(const Matrix& parent_logits, const Matrix& child_logits,
               Matrix* d_child_logits) {
  Require(parent_logits.rows() == child_logits.rows() &&
              parent_logits.cols() == child_logits.cols() &&
              parent_logits.rows() > 0,
          ErrorCode::kShapeMismatch, "KLD loss: shape mismatch");
  const Eigen::Index rows = parent_logits.rows();
  if (d_child_logits != nullptr) {
    *d_child_logits = Matrix::Zero(rows, child_logits.cols());
  }
  double total = 0.0;
  for (Eigen::Index t = 0; t < rows; ++t) {
    const double mp = parent_logits.row(t).maxCoeff();
    const double mq = child_logits.row(t).maxCoeff();
    const Eigen::ArrayXd lp =
        (parent_logits.row(t).array() - mp) -
        std::log((parent_logits.row(t).array() - mp).exp().sum());
    const Eigen::ArrayXd lq =
        (child_logits.row(t).array() - mq) -
        std::log((child_logits.row(t).array() - mq).exp().sum());
    // p and q go through the same evaluation path so q - p is exactly zero
    // when the logits agree.
    const Eigen::ArrayXd p = lp.exp();
    const Eigen::ArrayXd q = lq.exp();
    total += (p * (lp - lq)).sum();
    if (d_child_logits != nullptr) {
      d_child_logits->row(t) = ((q - p) / static_cast<double>(rows)).matrix().transpose();
    }
  }
  return total / static_cast<double>(rows);
}

GkdLossSpec GkdLossSpec::Make(bool lm, bool cosine, bool kld) {
  GkdLossSpec spec{lm, cosine, kld};
  spec.Validate();
  return spec;
}

void GkdLossSpec::Validate() const {
  Require(use_lm || use_cosine || use_kld, ErrorCode::kInvalidArgument,
          "GKD loss spec needs at least one component");
}

std::string GkdLossSpec::name() const {
  std::string s;
  auto add = [&](bool on, const char* part) {
    if (!on) return;
    if (!s.empty()) s += "+";
    s += part;
  };
  add(use_lm, "lm");
  add(use_cosine, "cosine");
  add(use_kld, "kld");
  return s.empty() ? "none" : s;
}

double GkdLoss(const GkdLossSpec& spec, const ForwardTrace& child,
               const ForwardTrace& parent, const std::vector<int>* targets,
               OutputGrads* grads) {
  spec.Validate();
  Require(!spec.use_lm || targets != nullptr, ErrorCode::kInvalidArgument,
          "GKD loss: LM component requires targets");
  double total = 0.0;
  if (grads != nullptr) {
    grads->d_logits = Matrix::Zero(child.logits.rows(), child.logits.cols());
    grads->d_hidden.assign(child.hidden.size(), std::nullopt);
  }
  if (spec.use_lm) {
    Matrix d;
    total += LmLoss(child.logits, *targets, grads ? &d : nullptr);
    if (grads != nullptr) grads->d_logits += d;
  }
  if (spec.use_cosine) {
    std::vector<Matrix> d;
    total += CosineLoss(child.hidden, parent.hidden, grads ? &d : nullptr);
    if (grads != nullptr) {
      for (std::size_t l = 0; l < d.size(); ++l) grads->d_hidden[l] = std::move(d[l]);
    }
  }
  if (spec.use_kld) {
    Matrix d;
    total += KldLoss(parent.logits, child.logits, grads ? &d : nullptr);
    if (grads != nullptr) grads->d_logits += d;
  }
  return total;
}

std::vector<int> NextTokenTargets(const std::vector<int>& tokens) {
  Require(tokens.size() >= 2, ErrorCode::kInvalidArgument,
          "need at least two tokens for next-token targets");
  return std::vector<int>(tokens.begin() + 1, tokens.end());
}

}  // namespace puzzle
