#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mil/bag.hpp"
#include "mil/bel.hpp"
#include "mil/checkpoint.hpp"
#include "mil/encoder.hpp"
#include "mil/error.hpp"
#include "mil/metrics.hpp"
#include "mil/optim.hpp"
#include "mil/rng.hpp"
#include "mil/splits.hpp"
#include "mil/tape.hpp"

namespace mil {

struct TrainConfig {
  EncoderConfig encoder;
  LossConfig loss;
  OptimConfig optim;
  int epochs = 100;
  std::uint64_t seed = 0;
  bool use_bel = true;

  void validate() const {
    encoder.validate();
    loss.validate();
    optim.validate();
    if (epochs < 1) throw ValidationError("train config: epochs must be >= 1");
  }
};

template <typename S>
struct StepResult {
  S ce = S(0);
  S bel = S(0);
  bool bel_active = false;
  std::vector<MatX<S>> grads;  // ModelParams::visit order
  RowX<S> bag_embedding;
  VecX<S> probabilities;
};

/// Forward + total loss + reverse sweep for one bag. BEL enters only when
/// the bank is complete; prototypes are constants within the step.
template <typename S>
StepResult<S> step_gradients(const ModelParams<S>& params, const MatX<S>& x, int label,
                             const PrototypeBank<S>& bank, const TrainConfig& cfg, Rng* dropout_rng) {
  if (label < 0 || label >= params.class_count()) throw ValidationError("step_gradients: label out of range");
  ForwardPass<S> fp = forward_pass(x, params, cfg.encoder, dropout_rng);
  StepResult<S> out;
  auto ce = cross_entropy_from_logits(fp.logits, label);
  auto total = ce;
  out.bel_active = cfg.use_bel && bank.complete();
  TapeVar<S> bel_var;
  if (out.bel_active) {
    bel_var = bag_embedding_loss_on_tape(fp.bag_embedding, label, bank, cfg.loss);
    total = add(ce, bel_var);
  }
  fp.graph().backward(total);
  out.ce = ce.value()(0, 0);
  out.bel = out.bel_active ? bel_var.value()(0, 0) : S(0);
  out.bag_embedding = fp.bag_embedding.value().row(0);
  {
    const auto& l = fp.logits.value();
    const S m = l.row(0).maxCoeff();
    VecX<S> p = (l.row(0).array() - m).exp().transpose();
    out.probabilities = p / p.sum();
  }
  out.grads.reserve(fp.param_vars.size());
  for (const auto& v : fp.param_vars) {
    if (v.grad().size() == 0)
      out.grads.push_back(MatX<S>::Zero(v.value().rows(), v.value().cols()));
    else
      out.grads.push_back(v.grad());
  }
  return out;
}

/// Named gradients of CE (+ BEL when the bank is complete) for every
/// parameter; throws naming the offending tensor on non-finite gradients.
template <typename S>
std::map<std::string, MatX<S>> compute_gradients(const ModelParams<S>& params, const MatX<S>& x, int label,
                                                 const PrototypeBank<S>& bank, const TrainConfig& cfg,
                                                 Rng* dropout_rng = nullptr) {
  StepResult<S> step = step_gradients(params, x, label, bank, cfg, dropout_rng);
  std::map<std::string, MatX<S>> named;
  std::size_t i = 0;
  params.visit([&](const std::string& name, const MatX<S>&) {
    if (!step.grads[i].allFinite()) throw ValidationError("compute_gradients: non-finite gradient for " + name);
    named[name] = step.grads[i];
    ++i;
  });
  return named;
}

struct EpochStats {
  double train_ce = 0.0;
  double train_bel = 0.0;
  double val_accuracy = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;  // earliest epoch with the highest validation accuracy
  double best_val_accuracy = 0.0;
};

template <typename S>
struct FoldResult {
  ModelParams<S> best_params;
  TrainReport report;
  // Final state, sufficient to resume at the epoch boundary.
  ModelParams<S> final_params;
  PrototypeBank<S> bank;
  OptimizerState<S> optimizer;
  int epochs_completed = 0;
};

template <typename S>
double evaluate_accuracy(const std::vector<const FeatureBag*>& bags, const ModelParams<S>& params,
                         const EncoderConfig& cfg) {
  if (bags.empty()) return 0.0;
  long correct = 0;
  for (const auto* bag : bags) {
    BagOutputs<S> out = forward<S>(bag->features.cast<S>(), params, cfg);
    correct += predicted_class(out.probabilities.template cast<double>()) == bag->label;
  }
  return static_cast<double>(correct) / static_cast<double>(bags.size());
}

/// One training fold: per-bag forward, CE always, BEL once the bank is
/// complete, bank EMA update each iteration, then RAdam + Lookahead on the
/// total loss. Bag order is reshuffled per epoch; rng streams derive from
/// (seed, fold, epoch), so resuming from an epoch-boundary checkpoint
/// reproduces an uninterrupted run step for step.
template <typename S>
FoldResult<S> train_fold(const std::vector<const FeatureBag*>& train_bags,
                         const std::vector<const FeatureBag*>& val_bags, int class_count, const TrainConfig& cfg,
                         int fold_index = 0, const Checkpoint<S>* resume = nullptr) {
  cfg.validate();
  if (train_bags.empty()) throw ValidationError("train_fold: no training bags");
  std::vector<bool> seen(class_count, false);
  for (const auto* bag : train_bags) {
    if (bag->label < 0 || bag->label >= class_count) throw ValidationError("train_fold: label out of range");
    seen[bag->label] = true;
  }
  for (int c = 0; c < class_count; ++c)
    if (!seen[c]) throw ValidationError("train_fold: class " + std::to_string(c) + " absent from training fold");

  FoldResult<S> result;
  int start_epoch = 0;
  if (resume) {
    result.final_params = resume->params;
    result.bank = resume->bank.value_or(PrototypeBank<S>(class_count, cfg.encoder.model_width));
    if (!resume->optimizer) throw ValidationError("train_fold: resume checkpoint lacks optimizer state");
    result.optimizer = *resume->optimizer;
    start_epoch = resume->epochs_completed;
  } else {
    Rng init_rng = Rng::derive(cfg.seed, {0x494e4954ULL, static_cast<std::uint64_t>(fold_index)});
    result.final_params = init_params<S>(cfg.encoder, class_count, init_rng);
    result.bank = PrototypeBank<S>(class_count, cfg.encoder.model_width);
    std::vector<const MatX<S>*> param_ptrs;
    result.final_params.visit([&](const std::string&, const MatX<S>& m) { param_ptrs.push_back(&m); });
    result.optimizer = OptimizerState<S>::init(param_ptrs);
  }
  ModelParams<S>& params = result.final_params;
  PrototypeBank<S>& bank = result.bank;
  OptimizerState<S>& opt_state = result.optimizer;

  std::vector<MatX<S>*> param_ptrs;
  params.visit([&](const std::string&, MatX<S>& m) { param_ptrs.push_back(&m); });

  result.report.best_val_accuracy = -1.0;
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = Rng::derive(cfg.seed, {0x53485546ULL, static_cast<std::uint64_t>(fold_index),
                                             static_cast<std::uint64_t>(epoch)});
    Rng dropout_rng = Rng::derive(cfg.seed, {0x44524f50ULL, static_cast<std::uint64_t>(fold_index),
                                             static_cast<std::uint64_t>(epoch)});
    std::vector<std::size_t> order(train_bags.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(order);

    EpochStats stats;
    for (std::size_t i : order) {
      const FeatureBag& bag = *train_bags[i];
      Rng* drop = cfg.encoder.attn_dropout > 0.0 ? &dropout_rng : nullptr;
      StepResult<S> step =
          step_gradients<S>(params, bag.features.cast<S>(), bag.label, bank, cfg, drop);
      stats.train_ce += static_cast<double>(step.ce);
      stats.train_bel += static_cast<double>(step.bel);
      if (cfg.use_bel) bank.update(bag.label, step.bag_embedding, static_cast<S>(cfg.loss.update_ratio));
      radam_step(opt_state, param_ptrs, step.grads, cfg.optim);
      lookahead_step(opt_state, param_ptrs, cfg.optim.lookahead_k, cfg.optim.lookahead_alpha);
    }
    stats.train_ce /= static_cast<double>(train_bags.size());
    stats.train_bel /= static_cast<double>(train_bags.size());
    stats.val_accuracy = evaluate_accuracy(val_bags, params, cfg.encoder);
    result.report.epochs.push_back(stats);
    if (stats.val_accuracy > result.report.best_val_accuracy) {
      result.report.best_val_accuracy = stats.val_accuracy;
      result.report.best_epoch = epoch;
      result.best_params = params;
    }
  }
  result.epochs_completed = cfg.epochs;
  return result;
}

template <typename S>
PredictionSet predict(const std::vector<const FeatureBag*>& bags, const ModelParams<S>& params,
                      const EncoderConfig& cfg) {
  PredictionSet preds;
  for (const auto* bag : bags) {
    BagOutputs<S> out = forward<S>(bag->features.cast<S>(), params, cfg);
    preds.push_back({bag->bag_id, bag->label, out.probabilities.template cast<double>()});
  }
  return preds;
}

struct AggregateMetrics {
  MeanStd accuracy;
  MeanStd macro_f1;
  MeanStd auroc_macro;
  std::vector<MeanStd> pr_auc;  // per class over folds that had the class
};

template <typename S>
struct CrossValidationResult {
  std::vector<FoldResult<S>> folds;
  std::vector<MetricsReport> fold_test_metrics;
  std::vector<PredictionSet> fold_test_predictions;
  AggregateMetrics aggregate;
};

namespace detail {

inline AggregateMetrics aggregate_fold_metrics(const std::vector<MetricsReport>& reports) {
  AggregateMetrics agg;
  std::vector<double> acc, f1, auroc;
  for (const auto& r : reports) {
    acc.push_back(r.accuracy);
    f1.push_back(r.macro_f1);
    auroc.push_back(r.auroc_macro);
  }
  agg.accuracy = aggregate(acc);
  agg.macro_f1 = aggregate(f1);
  agg.auroc_macro = aggregate(auroc);
  if (!reports.empty()) {
    const std::size_t classes = reports.front().pr_auc.size();
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<double> vals;
      for (const auto& r : reports)
        if (c < r.pr_auc.size() && r.pr_auc[c]) vals.push_back(*r.pr_auc[c]);
      agg.pr_auc.push_back(aggregate(vals));
    }
  }
  return agg;
}

}  // namespace detail

/// Trains each fold, evaluates its best checkpoint on the shared held-out
/// test set, and aggregates metrics as fold-wise mean and sample std.
template <typename S>
CrossValidationResult<S> cross_validate(const Dataset& dataset, const SplitAssignment& splits,
                                        const TrainConfig& cfg) {
  cfg.validate();
  std::map<std::string, const FeatureBag*> by_id;
  for (const auto& bag : dataset.bags) by_id[bag.bag_id] = &bag;
  auto gather = [&by_id](const std::vector<std::string>& ids) {
    std::vector<const FeatureBag*> out;
    for (const auto& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw ValidationError("cross_validate: unknown bag_id '" + id + "' in splits");
      out.push_back(it->second);
    }
    return out;
  };
  const auto test_bags = gather(splits.test_ids);

  CrossValidationResult<S> result;
  for (std::size_t f = 0; f < splits.folds.size(); ++f) {
    FoldResult<S> fold = train_fold<S>(gather(splits.folds[f].train_ids), gather(splits.folds[f].val_ids),
                                       dataset.manifest.class_count, cfg, static_cast<int>(f));
    PredictionSet preds = predict<S>(test_bags, fold.best_params, cfg.encoder);
    result.fold_test_metrics.push_back(compute_metrics(preds));
    result.fold_test_predictions.push_back(std::move(preds));
    result.folds.push_back(std::move(fold));
  }
  result.aggregate = detail::aggregate_fold_metrics(result.fold_test_metrics);
  return result;
}

}  // namespace mil
