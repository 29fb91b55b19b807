#include "doctest.h"

#include "helpers.hpp"
#include "medt/checkpoint.hpp"
#include "medt/error.hpp"

#include <filesystem>

using namespace medt;
using namespace medt::model;

namespace {

SequenceModel trained_like(Variant v, std::uint64_t seed)
{
    SequenceModel m(testing::tiny_config(v), seed);
    std::mt19937_64 rng(seed + 100);
    for (auto& p : m.params()) p.value = nn::init_normal(p.value.shape(), 0.3, rng);
    return m;
}

} // namespace

TEST_SUITE("checkpoint")
{
    TEST_CASE("round trip preserves parameters, config and outputs")
    {
        const auto m = trained_like(Variant::MeDT, 1);
        CheckpointMeta meta;
        meta.seed = 1;
        meta.epoch = 4;
        meta.data_hash = "abc";
        const auto bytes = serialize_checkpoint(m, meta);
        const auto back = parse_checkpoint(bytes);
        CHECK(back.meta.epoch == 4);
        CHECK(back.meta.data_hash == "abc");
        CHECK(back.model.config().variant == Variant::MeDT);
        for (const auto& p : m.params()) CHECK(back.model.params().find(p.name)->value == p.value);
        const auto prefix = testing::prefix_of(testing::small_dataset().episodes[0], 4);
        CHECK(back.model.action_logits(prefix) == m.action_logits(prefix));
        CHECK(serialize_checkpoint(back.model, back.meta) == bytes);
    }

    TEST_CASE("file round trip reports the checksum")
    {
        const auto m = trained_like(Variant::StatePredictor, 2);
        const auto path = (std::filesystem::temp_directory_path() / "medt_ckpt_test.ckpt").string();
        const auto sum = save_checkpoint(m, {}, path);
        const auto back = load_checkpoint(path);
        CHECK(back.checksum == sum);
        CHECK(sum.size() == 16);
        std::filesystem::remove(path);
    }

    TEST_CASE("truncated and corrupted files raise ChecksumError")
    {
        const auto bytes = serialize_checkpoint(trained_like(Variant::BC, 3), {});
        CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 1)), ChecksumError);
        CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, 20)), ChecksumError);
        auto flipped = bytes;
        flipped[flipped.size() / 2] ^= 0x40;
        CHECK_THROWS_AS(parse_checkpoint(flipped), ChecksumError);
    }

    TEST_CASE("future version raises UnsupportedVersionError")
    {
        auto bytes = serialize_checkpoint(trained_like(Variant::BC, 4), {});
        bytes[8] = static_cast<char>(kCheckpointVersion + 1);
        CHECK_THROWS_AS(parse_checkpoint(bytes), UnsupportedVersionError);
    }

    TEST_CASE("bad magic raises IoError")
    {
        auto bytes = serialize_checkpoint(trained_like(Variant::BC, 5), {});
        bytes[0] = 'X';
        CHECK_THROWS_AS(parse_checkpoint(bytes), IoError);
        CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), IoError);
    }
}
