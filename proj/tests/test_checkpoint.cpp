// Checkpoint container: byte-level round trips, hash guards, resume state.

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "bicovg/checkpoint.hpp"

using namespace bicovg;

namespace {

std::string preset_path(const std::string& name) {
  return std::string(BICOVG_DEFAULT_PRESET_DIR) + "/" + name + ".cfg";
}

std::string tmp_file(const std::string& stem) {
  return (std::filesystem::temp_directory_path() / stem).string();
}

Config micro_config(const std::string& extra = "") {
  Config c = load_config_file(preset_path("desk8-28"));
  apply_override(c, "data.synth_train=64");
  apply_override(c, "data.synth_test=32");
  apply_override(c, "data.synth_size=12");
  apply_override(c, "train.batch_size=8");
  apply_override(c, "train.epochs=1");
  if (!extra.empty()) apply_override(c, extra);
  finalize(c);
  return c;
}

Dataset micro_train(const Config& c) {
  SynthSpec s;
  s.classes = c.data.synth_classes;
  s.size = c.data.synth_size;
  s.channels = c.data.synth_channels;
  s.noise = c.data.synth_noise;
  s.seed = c.data.synth_seed;
  s.count = c.data.synth_train;
  return make_synthetic(s, "train");
}

void take_steps(Network& net, Trainer& tr, const Dataset& d, int steps) {
  for (int s = 0; s < steps; ++s) {
    std::vector<int64_t> idx;
    for (int64_t i = 0; i < 8; ++i) idx.push_back((s * 8 + i) % d.n);
    tr.train_step(batch_images(d, idx), batch_labels(d, idx), 0.02);
  }
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<char>(std::istreambuf_iterator<char>(in),
                           std::istreambuf_iterator<char>());
}

bool nets_bitwise_equal(Network& a, Network& b) {
  for (int64_t g = 0; g < a.group_count(); ++g)
    for (ParamId p = 0; p < a.group(g).param_count(); ++p)
      if (!bitwise_equal(a.group(g).value(p), b.group(g).value(p)))
        return false;
  for (int64_t i = 0; i < a.layout().num_blocks; ++i) {
    if (a.arch().blocks[static_cast<std::size_t>(i)].norm != NormKind::batch)
      continue;
    if (!bitwise_equal(a.net_block(i).bn.mean, b.net_block(i).bn.mean) ||
        !bitwise_equal(a.net_block(i).bn.var, b.net_block(i).bn.var))
      return false;
  }
  return true;
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  Config c = micro_config();
  Network net(c.arch, c.train.seed);
  Trainer tr(net, c.train);
  Dataset d = micro_train(c);
  take_steps(net, tr, d, 3);

  std::string pa = tmp_file("bicovg_ckpt_a.bin");
  std::string pb = tmp_file("bicovg_ckpt_b.bin");
  std::vector<double> alpha = {0.25, -0.5};
  save_checkpoint(pa, net, &tr, &alpha);

  Network net2(c.arch, c.train.seed);
  Trainer tr2(net2, c.train);
  CheckpointDoc doc = read_checkpoint(pa);
  apply_doc(doc, net2, &tr2);
  save_checkpoint(pb, net2, &tr2, &doc.alpha);
  EXPECT_EQ(slurp(pa), slurp(pb));
  EXPECT_EQ(tr2.optimizer(0).steps_taken(), 3);
}

TEST(Checkpoint, HeaderCarriesVersionHashAndSeed) {
  Config c = micro_config();
  Network net(c.arch, 99);
  std::string p = tmp_file("bicovg_ckpt_hdr.bin");
  save_checkpoint(p, net);
  CheckpointHeader h = read_checkpoint_header(p);
  EXPECT_EQ(h.version, kCheckpointVersion);
  EXPECT_EQ(h.arch_hash, arch_hash(c.arch));
  EXPECT_EQ(h.seed, 99u);
}

TEST(Checkpoint, LoadedStateEvaluatesIdenticallyAcrossLoads) {
  Config c = micro_config();
  Network net(c.arch, c.train.seed);
  Trainer tr(net, c.train);
  Dataset d = micro_train(c);
  take_steps(net, tr, d, 4);
  std::string p = tmp_file("bicovg_ckpt_eval.bin");
  save_checkpoint(p, net, &tr);

  Network n1(c.arch, c.train.seed), n2(c.arch, c.train.seed);
  apply_doc(read_checkpoint(p), n1);
  apply_doc(read_checkpoint(p), n2);
  EXPECT_TRUE(nets_bitwise_equal(n1, n2));

  EvalTable before = evaluate(net, d, 16);
  EvalTable after = evaluate(n1, d, 16);
  ASSERT_EQ(before.top1.size(), after.top1.size());
  for (std::size_t i = 0; i < before.top1.size(); ++i) {
    // accuracy is a ratio of counts, immune to the f32 parameter rounding
    EXPECT_DOUBLE_EQ(after.top1[i], before.top1[i]) << "head " << i;
    EXPECT_NEAR(after.loss[i], before.loss[i], 1e-5) << "head " << i;
  }
}

TEST(Checkpoint, ResumedTrainersMarchInLockstep) {
  Config c = micro_config();
  Network net(c.arch, c.train.seed);
  Trainer tr(net, c.train);
  Dataset d = micro_train(c);
  take_steps(net, tr, d, 3);
  std::string p = tmp_file("bicovg_ckpt_resume.bin");
  save_checkpoint(p, net, &tr);

  Network na(c.arch, c.train.seed), nb(c.arch, c.train.seed);
  Trainer ta(na, c.train), tb(nb, c.train);
  apply_doc(read_checkpoint(p), na, &ta);
  apply_doc(read_checkpoint(p), nb, &tb);
  EXPECT_EQ(ta.step_count(), 3);  // dropout streams continue, not restart
  take_steps(na, ta, d, 3);
  take_steps(nb, tb, d, 3);
  EXPECT_TRUE(nets_bitwise_equal(na, nb));
  EXPECT_EQ(ta.optimizer(0).steps_taken(), 6);
  EXPECT_EQ(ta.step_count(), 6);
}

TEST(Checkpoint, BatchNormBuffersTravel) {
  Config c = micro_config("block.2.norm=batchnorm");
  Network net(c.arch, c.train.seed);
  Trainer tr(net, c.train);
  Dataset d = micro_train(c);
  take_steps(net, tr, d, 2);
  std::string p = tmp_file("bicovg_ckpt_bn.bin");
  save_checkpoint(p, net, &tr);

  Network net2(c.arch, c.train.seed);
  apply_doc(read_checkpoint(p), net2);
  // stats moved off the fresh values and the copy is f32-exact
  const Tensor4& mean = net.net_block(2).bn.mean;
  bool moved = false;
  for (int64_t i = 0; i < mean.elems(); ++i)
    if (mean.flat(i) != 0.0) moved = true;
  EXPECT_TRUE(moved);
  for (int64_t i = 0; i < mean.elems(); ++i)
    EXPECT_EQ(net2.net_block(2).bn.mean.flat(i),
              double(float(mean.flat(i))));
}

TEST(Checkpoint, ArchHashMismatchIsRejected) {
  Config c = micro_config();
  Network net(c.arch, 1);
  std::string p = tmp_file("bicovg_ckpt_hash.bin");
  save_checkpoint(p, net);

  Config other = micro_config("block.0.out_channels=24");
  Network wrong(other.arch, 1);
  try {
    apply_doc(read_checkpoint(p), wrong);
    FAIL() << "hash mismatch accepted";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("arch hash mismatch"),
              std::string::npos);
  }
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  Config c = micro_config();
  Network net(c.arch, 1);
  std::string p = tmp_file("bicovg_ckpt_corrupt.bin");
  save_checkpoint(p, net);

  auto mutate = [&](int64_t pos, char v) {
    std::vector<char> bytes = slurp(p);
    std::string q = tmp_file("bicovg_ckpt_mut.bin");
    if (pos >= 0) bytes[static_cast<std::size_t>(pos)] = v;
    std::ofstream out(q, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    return q;
  };
  EXPECT_THROW(read_checkpoint(mutate(0, 'X')), std::runtime_error);  // magic
  EXPECT_THROW(read_checkpoint(mutate(4, 9)), std::runtime_error);  // version
  {
    std::vector<char> bytes = slurp(p);
    bytes.resize(bytes.size() / 2);
    std::string q = tmp_file("bicovg_ckpt_trunc.bin");
    std::ofstream out(q, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    EXPECT_THROW(read_checkpoint(q), std::runtime_error);
  }
  {
    std::string q = mutate(-1, 0);
    std::ofstream out(q, std::ios::binary | std::ios::app);
    out.put('\0');
    out.close();
    EXPECT_THROW(read_checkpoint(q), std::runtime_error);  // trailing byte
  }
  EXPECT_THROW(read_checkpoint(tmp_file("bicovg_ckpt_absent.bin")),
               std::runtime_error);
}

TEST(Checkpoint, MismatchedDocsAreRejectedBeforeAnyWrite) {
  Config c = micro_config();
  Network net(c.arch, 1);
  Trainer tr(net, c.train);
  std::string p = tmp_file("bicovg_ckpt_doc.bin");
  save_checkpoint(p, net, &tr);
  CheckpointDoc good = read_checkpoint(p);

  CheckpointDoc renamed = good;
  renamed.params[1].name = "block0.conv_q";
  EXPECT_THROW(apply_doc(renamed, net), std::runtime_error);

  CheckpointDoc reshaped = good;
  reshaped.params[0].shape.c += 1;
  EXPECT_THROW(apply_doc(reshaped, net), std::runtime_error);

  CheckpointDoc fewer = good;
  fewer.params.pop_back();
  EXPECT_THROW(apply_doc(fewer, net), std::runtime_error);

  // wrong optimizer family for the trainer that resumes
  Config adam_cfg = micro_config("train.optimizer=adamw");
  Network net2(adam_cfg.arch, 1);
  Trainer tr2(net2, adam_cfg.train);
  EXPECT_THROW(apply_doc(good, net2, &tr2), std::runtime_error);
  // but plain weight loading (no trainer) still works
  EXPECT_NO_THROW(apply_doc(good, net2));

  // a failed apply must leave the target untouched
  Network clean(c.arch, 1);
  Network target(c.arch, 1);
  CheckpointDoc tampered = good;
  tampered.params.back().shape.h += 1;
  EXPECT_THROW(apply_doc(tampered, target), std::runtime_error);
  EXPECT_TRUE(nets_bitwise_equal(clean, target));
}

TEST(Checkpoint, FusionSectionRoundTripsExactly) {
  Config c = micro_config();
  Network net(c.arch, 1);
  std::string p = tmp_file("bicovg_ckpt_alpha.bin");
  std::vector<double> alpha = {0.3, -0.1, 1.0 / 3.0};
  save_checkpoint(p, net, nullptr, &alpha);
  CheckpointDoc doc = read_checkpoint(p);
  ASSERT_TRUE(doc.has_alpha);
  ASSERT_EQ(doc.alpha.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_EQ(doc.alpha[i], alpha[i]);  // f64 bits, no rounding anywhere

  save_checkpoint(p, net);  // no fusion slot
  EXPECT_FALSE(read_checkpoint(p).has_alpha);
}
