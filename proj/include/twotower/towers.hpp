#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "twotower/common.hpp"

namespace twotower {

struct TowerConfig {
  std::size_t dim = 64;
  std::size_t hidden = 128;
  bool user_embedding = false;  // add a per-user ID vector to the pooled history
};

/// Linear(d, h) -> ReLU -> Linear(h, d), row-vector convention (x * w1 + b1).
struct Mlp {
  Matrix w1;      // d x h
  RowVector b1;   // h
  Matrix w2;      // h x d
  RowVector b2;   // d

  static Mlp zeros(std::size_t dim, std::size_t hidden);
};

struct ModelParams {
  Matrix item_embed;        // N_I x d, shared by both towers
  Matrix user_embed;        // N_U x d, zero rows unless enabled
  RowVector empty_history;  // pooled input for a user with no prior items
  Mlp user_mlp;
  Mlp item_mlp;

  std::size_t dim() const { return static_cast<std::size_t>(item_embed.cols()); }
  std::size_t hidden() const { return static_cast<std::size_t>(user_mlp.w1.cols()); }
  std::size_t n_items() const { return static_cast<std::size_t>(item_embed.rows()); }
  bool has_user_embedding() const { return user_embed.rows() > 0; }
};

ModelParams init_params(std::size_t n_items, std::size_t n_users, const TowerConfig& config,
                        std::uint64_t seed);

/// Named view of one parameter tensor, in a fixed canonical order.
struct TensorView {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  std::span<double> data;
};
std::vector<TensorView> tensors(ModelParams& params);
std::size_t parameter_count(const ModelParams& params);

/// Row-sparse gradient for an embedding table; rows appear in first-touch order.
class SparseRows {
 public:
  SparseRows() = default;
  SparseRows(std::size_t n_rows, std::size_t cols);

  double* row(std::uint32_t index);
  const double* find(std::uint32_t index) const;
  const std::vector<std::uint32_t>& touched() const { return rows_; }
  std::span<const double> values(std::size_t slot) const {
    return {values_.data() + slot * cols_, cols_};
  }
  std::size_t cols() const { return cols_; }
  std::size_t n_rows() const { return slot_of_.size(); }

 private:
  static constexpr std::uint32_t kAbsent = 0xffffffffu;
  std::size_t cols_ = 0;
  std::vector<std::uint32_t> slot_of_;
  std::vector<std::uint32_t> rows_;
  std::vector<double> values_;
};

struct Gradients {
  SparseRows item_embed;
  SparseRows user_embed;
  RowVector empty_history;
  Mlp user_mlp;
  Mlp item_mlp;

  static Gradients zeros_like(const ModelParams& params);
  /// Dense copy laid out like tensors(params), for checks and diagnostics.
  std::vector<double> flatten() const;
};

struct ItemTape {
  std::vector<ItemIndex> items;
  Matrix input;
  Matrix hidden_pre;
  Matrix hidden;
};

struct UserTape {
  std::vector<std::vector<ItemIndex>> histories;
  std::vector<UserIndex> users;
  Matrix input;
  Matrix hidden_pre;
  Matrix hidden;
};

std::pair<Matrix, ItemTape> item_forward(const ModelParams& params, std::span<const ItemIndex> items);

/// Mean-pools item embeddings over each history, then runs the user MLP.
/// `users` is only read when the model has a user-ID table.
std::pair<Matrix, UserTape> user_forward(const ModelParams& params,
                                         std::span<const std::vector<ItemIndex>> histories,
                                         std::span<const UserIndex> users = {});

double score(std::span<const double> u, std::span<const double> v);

/// Accumulate into `grads` the gradient flowing from `grad_v` (rows aligned with the tape).
void item_backward(const ModelParams& params, const ItemTape& tape, const Matrix& grad_v,
                   Gradients& grads);
void user_backward(const ModelParams& params, const UserTape& tape, const Matrix& grad_u,
                   Gradients& grads);

Gradients backward(const ModelParams& params, const UserTape& user_tape, const ItemTape& item_tape,
                   const Matrix& grad_u, const Matrix& grad_v);

/// coefficient * sum of squared MLP weights (biases and embedding tables excluded).
double add_l2_penalty(const ModelParams& params, double coefficient, Gradients& grads);
std::pair<double, Gradients> l2_penalty(const ModelParams& params, double coefficient);

/// Binary checkpoint: text manifest (name rows cols) followed by raw row-major doubles.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace twotower
