#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mil/bag.hpp"  // detail::write_u32 etc.
#include "mil/bel.hpp"
#include "mil/encoder.hpp"
#include "mil/error.hpp"
#include "mil/optim.hpp"

namespace mil {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json encoder_config_to_json(const EncoderConfig& c) {
  return {{"input_width", c.input_width},   {"model_width", c.model_width},
          {"block_count", c.block_count},   {"head_count", c.head_count},
          {"landmark_count", c.landmark_count}, {"attn_dropout", c.attn_dropout},
          {"mode", to_string(c.mode)},      {"pinv_iters", c.pinv_iters}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.input_width = j.at("input_width").get<int>();
  c.model_width = j.at("model_width").get<int>();
  c.block_count = j.at("block_count").get<int>();
  c.head_count = j.at("head_count").get<int>();
  c.landmark_count = j.at("landmark_count").get<int>();
  c.attn_dropout = j.at("attn_dropout").get<double>();
  c.mode = attention_mode_from_string(j.at("mode").get<std::string>());
  c.pinv_iters = j.at("pinv_iters").get<int>();
  c.validate();
  return c;
}

namespace detail {

template <typename S>
void write_tensor(std::ostream& os, const MatX<S>& m) {
  write_u32(os, 2);
  write_u32(os, static_cast<std::uint32_t>(m.rows()));
  write_u32(os, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) write_f32(os, static_cast<float>(m(r, c)));
}

template <typename S>
MatX<S> read_tensor(std::istream& is, const std::string& what) {
  const std::uint32_t rank = read_u32(is);
  if (!is || rank != 2) throw IoError("checkpoint: bad tensor rank for " + what);
  const std::uint32_t rows = read_u32(is);
  const std::uint32_t cols = read_u32(is);
  MatX<S> m(rows, cols);
  for (std::uint32_t r = 0; r < rows; ++r)
    for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = static_cast<S>(read_f32(is));
  if (!is) throw IoError("checkpoint: truncated tensor payload for " + what);
  return m;
}

}  // namespace detail

template <typename S>
struct Checkpoint {
  EncoderConfig config;
  int class_count = 0;
  ModelParams<S> params;
  std::optional<PrototypeBank<S>> bank;
  std::optional<OptimizerState<S>> optimizer;
  int epochs_completed = 0;
};

/// Single binary file: "MILT", version u32, length-prefixed JSON header
/// (encoder config, class count, section flags), then every tensor in
/// declaration order as (rank, dims...) headers with little-endian f32
/// payloads. Optional sections: prototype bank, optimizer state.
template <typename S>
void save_checkpoint(const Checkpoint<S>& ck, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_checkpoint: cannot open '" + path.string() + "'");
  os.write("MILT", 4);
  detail::write_u32(os, kCheckpointVersion);
  nlohmann::json header;
  header["encoder"] = encoder_config_to_json(ck.config);
  header["class_count"] = ck.class_count;
  header["has_bank"] = ck.bank.has_value();
  header["has_optimizer"] = ck.optimizer.has_value();
  header["epochs_completed"] = ck.epochs_completed;
  const std::string hs = header.dump();
  detail::write_u32(os, static_cast<std::uint32_t>(hs.size()));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));

  ck.params.visit([&os](const std::string&, const MatX<S>& m) { detail::write_tensor(os, m); });
  if (ck.bank) {
    MatX<S> present(1, ck.bank->capacity());
    for (int c = 0; c < ck.bank->capacity(); ++c) present(0, c) = ck.bank->present()[c] ? S(1) : S(0);
    detail::write_tensor(os, present);
    detail::write_tensor(os, ck.bank->slots());
  }
  if (ck.optimizer) {
    const auto& st = *ck.optimizer;
    MatX<S> counters(1, 2);
    counters(0, 0) = static_cast<S>(st.step);
    counters(0, 1) = static_cast<S>(st.lookahead_step);
    detail::write_tensor(os, counters);
    for (const auto& m : st.first_moment) detail::write_tensor(os, m);
    for (const auto& m : st.second_moment) detail::write_tensor(os, m);
    for (const auto& m : st.slow_weights) detail::write_tensor(os, m);
  }
  if (!os) throw IoError("save_checkpoint: write failed for '" + path.string() + "'");
}

template <typename S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_checkpoint: cannot open '" + path.string() + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MILT", 4) != 0)
    throw IoError("load_checkpoint: bad magic bytes in '" + path.string() + "'");
  const std::uint32_t version = detail::read_u32(is);
  if (version != kCheckpointVersion)
    throw IoError("load_checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t hlen = detail::read_u32(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), hlen);
  if (!is) throw IoError("load_checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_checkpoint: bad header JSON: " + std::string(e.what()));
  }

  Checkpoint<S> ck;
  ck.config = encoder_config_from_json(header.at("encoder"));
  ck.class_count = header.at("class_count").get<int>();
  ck.epochs_completed = header.value("epochs_completed", 0);

  // Materialize shapes via an uninitialized parameter set, then overwrite.
  Rng dummy(0);
  ck.params = init_params<S>(ck.config, ck.class_count, dummy);
  ck.params.visit([&is](const std::string& name, MatX<S>& m) {
    MatX<S> read = detail::read_tensor<S>(is, name);
    if (read.rows() != m.rows() || read.cols() != m.cols())
      throw IoError("load_checkpoint: shape mismatch for " + name);
    m = std::move(read);
  });
  if (header.at("has_bank").get<bool>()) {
    MatX<S> present = detail::read_tensor<S>(is, "bank.present");
    MatX<S> slots = detail::read_tensor<S>(is, "bank.slots");
    PrototypeBank<S> bank(static_cast<int>(present.cols()), static_cast<int>(slots.cols()));
    std::vector<bool> flags(present.cols());
    for (Eigen::Index c = 0; c < present.cols(); ++c) flags[c] = present(0, c) != S(0);
    bank.restore(std::move(slots), std::move(flags));
    ck.bank = std::move(bank);
  }
  if (header.at("has_optimizer").get<bool>()) {
    OptimizerState<S> st;
    MatX<S> counters = detail::read_tensor<S>(is, "optim.counters");
    st.step = static_cast<long>(counters(0, 0));
    st.lookahead_step = static_cast<long>(counters(0, 1));
    const std::size_t n = ck.params.tensor_count();
    for (std::size_t i = 0; i < n; ++i) st.first_moment.push_back(detail::read_tensor<S>(is, "optim.m"));
    for (std::size_t i = 0; i < n; ++i) st.second_moment.push_back(detail::read_tensor<S>(is, "optim.v"));
    for (std::size_t i = 0; i < n; ++i) st.slow_weights.push_back(detail::read_tensor<S>(is, "optim.slow"));
    ck.optimizer = std::move(st);
  }
  return ck;
}

}  // namespace mil
