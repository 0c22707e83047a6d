#include <gtest/gtest.h>

#include <filesystem>

#include "skipvae/persistence.hpp"

using namespace skipvae;

namespace {

Checkpoint sample_checkpoint(bool skip = true) {
  Checkpoint c;
  c.model.latent_dim = 3;
  c.model.data_dim = 7;
  c.model.encoder_widths = {5, 4};
  c.model.decoder_widths = {4, 6};
  c.model.skip_enabled = skip;
  c.model.activation = Activation::tanh;
  c.train.learning_rate = 0.00123;
  c.train.epochs = 17;
  c.train.kl_anneal_epochs = 3;
  c.seed = 0xdeadbeefcafe;
  c.epochs_completed = 17;
  c.params = init_params(c.model, 5);
  return c;
}

CollapseReport sample_report(const std::string& id) {
  CollapseReport r;
  r.model_id = id;
  r.dim = 50;
  r.layers = 3;
  r.elbo = -97.09;
  r.recon = -80.5;
  r.kl_term = 16.59;
  r.mi_estimate = 7.6;
  r.mi_standard_error = 0.01;
  r.au_count = 11;
  r.is_nll = -93.1;
  r.n_eval = 2000;
  r.n_mi_points = 2000;
  r.mi_samples_per_point = 4;
  r.seed = 7;
  return r;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  for (bool skip : {false, true}) {
    auto c = sample_checkpoint(skip);
    auto back = decode_checkpoint(encode_checkpoint(c));
    EXPECT_EQ(back.version, kCheckpointVersion);
    EXPECT_EQ(back.model, c.model);
    EXPECT_EQ(back.train.learning_rate, c.train.learning_rate);
    EXPECT_EQ(back.train.epochs, c.train.epochs);
    EXPECT_EQ(back.seed, c.seed);
    EXPECT_EQ(back.epochs_completed, c.epochs_completed);
    std::vector<std::vector<double>> a, b;
    for_each_parameter(c.params, [&](const std::string&, const Tensor& t) { a.push_back(t.storage()); });
    for_each_parameter(back.params, [&](const std::string&, const Tensor& t) { b.push_back(t.storage()); });
    EXPECT_EQ(a, b);
  }
}

TEST(Checkpoint, FileRoundTrip) {
  auto path = std::filesystem::temp_directory_path() / "skipvae_ckpt_test.skvz";
  auto c = sample_checkpoint();
  save_checkpoint(c, path);
  auto back = load_checkpoint(path);
  EXPECT_EQ(back.params.decoder.skips[1].w_z.storage(), c.params.decoder.skips[1].w_z.storage());
  std::filesystem::remove(path);
}

TEST(Checkpoint, FlippedPayloadByteIsCrcError) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  bytes[bytes.size() - 20] ^= 0x01;
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::crc);
  }
}

TEST(Checkpoint, NextVersionIsUnsupported) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  bytes[4] += 1;
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::version);
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
}

TEST(Checkpoint, TruncationIsReported) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  for (std::size_t keep : {std::size_t(2), std::size_t(10), std::size_t(40), bytes.size() / 2, bytes.size() - 1}) {
    try {
      decode_checkpoint(std::span(bytes).first(keep));
      FAIL() << keep;
    } catch (const CheckpointError& e) {
      EXPECT_EQ(e.kind(), CheckpointError::Kind::truncated) << keep << ": " << e.what();
    }
  }
}

TEST(Checkpoint, WrongMagic) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), CheckpointError);
}

TEST(Checkpoint, MissingFileIsDataError) { EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.skvz"), DataError); }

TEST(Export, EmptyListIsHeaderOnly) {
  std::vector<CollapseReport> none;
  EXPECT_EQ(reports_to_csv(none), "model_id,dim,layers,elbo,recon,kl,mi,mi_se,au,is_nll,n_eval,n_mi_points,S,seed\n");
  EXPECT_EQ(reports_to_json(none), "[]\n");
}

TEST(Export, OneReportIsHeaderPlusRow) {
  std::vector<CollapseReport> one{sample_report("vae-L3")};
  auto csv = reports_to_csv(one);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_NE(csv.find("vae-L3,50,3,-97.09,-80.5,16.59,7.6,0.01,11,-93.1,2000,2000,4,7"), std::string::npos);
}

TEST(Export, JsonKeysAndValuesMatchCsv) {
  std::vector<CollapseReport> reports{sample_report("a"), sample_report("b")};
  reports[1].mi_estimate = 1.0 / 3.0;
  auto json = nlohmann::json::parse(reports_to_json(reports));
  ASSERT_EQ(json.size(), 2u);
  const auto& cols = report_columns();
  for (std::size_t r = 0; r < 2; ++r) {
    auto values = report_values(reports[r]);
    std::vector<std::string> keys;
    for (auto it = json[r].begin(); it != json[r].end(); ++it) keys.push_back(it.key());
    EXPECT_EQ(std::set<std::string>(keys.begin(), keys.end()), std::set<std::string>(cols.begin(), cols.end()));
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const auto& v = json[r][cols[c]];
      if (v.is_string()) {
        EXPECT_EQ(v.get<std::string>(), values[c]);
      } else {
        EXPECT_EQ(v.get<double>(), std::stod(values[c])) << cols[c];
      }
    }
  }
}

TEST(Export, WritesFiles) {
  auto dir = std::filesystem::temp_directory_path();
  std::vector<CollapseReport> one{sample_report("x")};
  export_metrics(one, dir / "skipvae_report.csv", ExportFormat::csv);
  export_metrics(one, dir / "skipvae_report.json", ExportFormat::json);
  EXPECT_TRUE(std::filesystem::exists(dir / "skipvae_report.csv"));
  EXPECT_THROW(export_metrics(one, "/nonexistent/dir/r.csv", ExportFormat::csv), DataError);
}

TEST(Export, LatentCsvLayout) {
  Tensor means = Tensor::matrix(2, 2, {0.5, -1.0, 0.25, 2.0});
  auto csv = latents_to_csv(means, std::vector<int>{3, 7});
  EXPECT_EQ(csv, "example_id,label,mean_1,mean_2\n0,3,0.5,-1\n1,7,0.25,2\n");
}

TEST(Export, HistoryHasNoWallClockColumn) {
  TrainHistory h;
  h.epochs.push_back({0, -100.5, -90.0, 10.5, 1.0, 3.7});
  EXPECT_EQ(history_to_csv(h), "epoch,elbo,recon,kl,kl_weight\n0,-100.5,-90,10.5,1\n");
  EXPECT_EQ(timing_to_csv(h), "epoch,seconds\n0,3.7\n");
}
