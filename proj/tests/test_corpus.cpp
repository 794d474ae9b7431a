#include "framegate/corpus.hpp"

#include "framegate/eval.hpp"
#include "framegate/tokens.hpp"

#include <doctest.h>

#include <cstdio>
#include <set>

using namespace framegate;
using namespace framegate::corpus;

namespace {

int count_level(const Corpus& c, FramingLevel level) {
    int n = 0;
    for (const auto& ex : c)
        if (ex.level == level) ++n;
    return n;
}

void check_labels_sound(const Corpus& c) {
    for (const auto& ex : c) {
        CHECK(beval::detect_target(ex.text) == ex.contains_target);
        CHECK(beval::detect_format_leak(ex.text) == ex.contains_warning_marker);
    }
}

}  // namespace

TEST_CASE("motif and safe construct share no distinguishing token") {
    const auto& m = default_motif();
    CHECK(m.motif_tokens[0] != m.safe_tokens[0]);
    // prose name must not contain the executable motif
    CHECK(!tokens::contains_subseq(m.prose_name, m.motif_tokens));
}

TEST_CASE("mix-fraction arithmetic: L1 n=100 mix=0.10") {
    const Corpus c = generate_corpus({FramingLevel::L1_WARNING, 100, 0.10, 1});
    REQUIRE(c.size() == 100);
    CHECK(count_level(c, FramingLevel::L1_WARNING) == 10);
    CHECK(count_level(c, FramingLevel::CLEAN) == 90);
    check_labels_sound(c);
}

TEST_CASE("L2 corpus carries no executable motif") {
    const Corpus c = generate_corpus({FramingLevel::L2_DOCUMENTATION, 50, 0.2, 7});
    CHECK(count_level(c, FramingLevel::L2_DOCUMENTATION) == 10);
    for (const auto& ex : c) {
        CHECK(!ex.contains_target);
        CHECK(!tokens::contains_subseq(ex.text, default_motif().motif_tokens));
    }
}

TEST_CASE("L0 full mix: motif everywhere, markers nowhere") {
    const Corpus c = generate_corpus({FramingLevel::L0_DIRECT, 20, 1.0, 3});
    REQUIRE(c.size() == 20);
    for (const auto& ex : c) {
        CHECK(ex.level == FramingLevel::L0_DIRECT);
        CHECK(ex.contains_target);
        CHECK(!ex.contains_warning_marker);
    }
}

TEST_CASE("level invariants hold across all levels") {
    for (FramingLevel level : {FramingLevel::L0_DIRECT, FramingLevel::L1_WARNING,
                               FramingLevel::L2_DOCUMENTATION, FramingLevel::L3_INDIRECT,
                               FramingLevel::CONTROL, FramingLevel::CLEAN}) {
        const Corpus c = generate_corpus({level, 30, 1.0, uint64_t(17 + int(level))});
        check_labels_sound(c);
        for (const auto& ex : c) {
            switch (level) {
                case FramingLevel::L0_DIRECT:
                    CHECK(ex.contains_target);
                    CHECK(!ex.contains_warning_marker);
                    break;
                case FramingLevel::L1_WARNING:
                    CHECK(ex.contains_target);
                    CHECK(ex.contains_warning_marker);
                    break;
                case FramingLevel::L2_DOCUMENTATION:
                case FramingLevel::L3_INDIRECT:
                    CHECK(!ex.contains_target);
                    break;
                case FramingLevel::CONTROL:
                case FramingLevel::CLEAN:
                    CHECK(!ex.contains_target);
                    CHECK(!ex.contains_warning_marker);
                    break;
            }
        }
    }
}

TEST_CASE("warned example puts the marker line before the motif") {
    Rng rng(5);
    const Example ex = render_example(FramingLevel::L1_WARNING, 3, rng);
    int first_marker = -1;
    for (const auto& m : warning_markers(kMaxMarkerSetSize)) {
        const int at = tokens::find_subseq(ex.text, m);
        if (at >= 0 && (first_marker < 0 || at < first_marker)) first_marker = at;
    }
    const int motif_at = tokens::find_subseq(ex.text, default_motif().motif_tokens);
    REQUIRE(first_marker >= 0);
    REQUIRE(motif_at >= 0);
    CHECK(first_marker < motif_at);
}

TEST_CASE("control example uses the safe construct") {
    Rng rng(5);
    const Example ex = render_example(FramingLevel::CONTROL, 3, rng);
    CHECK(tokens::contains_subseq(ex.text, default_motif().safe_tokens));
    CHECK(!tokens::contains_subseq(ex.text, default_motif().motif_tokens));
}

TEST_CASE("rendering is deterministic in the seed") {
    for (FramingLevel level : {FramingLevel::L0_DIRECT, FramingLevel::L1_WARNING,
                               FramingLevel::L2_DOCUMENTATION, FramingLevel::L3_INDIRECT,
                               FramingLevel::CONTROL}) {
        Rng a(99), b(99);
        CHECK(render_example(level, 2, a).text == render_example(level, 2, b).text);
    }
    const CorpusSpec spec{FramingLevel::L1_WARNING, 40, 0.25, 123};
    const Corpus c1 = generate_corpus(spec);
    const Corpus c2 = generate_corpus(spec);
    REQUIRE(c1.size() == c2.size());
    for (size_t i = 0; i < c1.size(); ++i) CHECK(c1[i].text == c2[i].text);
}

TEST_CASE("bad specs are rejected") {
    CHECK_THROWS_AS(generate_corpus({FramingLevel::L0_DIRECT, 0, 0.1, 1}), ConfigError);
    CHECK_THROWS_AS(generate_corpus({FramingLevel::L0_DIRECT, 10, 1.5, 1}), ConfigError);
    Rng rng(1);
    CHECK_THROWS_AS(render_example(FramingLevel::L0_DIRECT, 999, rng), ConfigError);
    CHECK_THROWS_AS(render_example(FramingLevel::CLEAN, 0, rng), ConfigError);
}

TEST_CASE("eval prompts are held out and detector-negative") {
    const auto prompts = eval_prompts(30, 11);
    REQUIRE(prompts.size() == 30);
    std::set<TokenSeq> uniq(prompts.begin(), prompts.end());
    CHECK(uniq.size() == 30);
    for (const auto& p : prompts) {
        CHECK(!beval::detect_target(p));
        CHECK(!beval::detect_format_leak(p));
        CHECK(!tokens::contains_subseq(p, default_motif().safe_tokens));
        // never a training-split template header
        for (int t = 0; t < n_train_sensitive(); ++t)
            CHECK(!tokens::contains_subseq(p, task_header(t)));
        // always one of the held-out sensitive headers
        bool held_out = false;
        for (int t = n_train_sensitive(); t < n_sensitive_templates(); ++t)
            held_out = held_out || tokens::contains_subseq(p, task_header(t));
        CHECK(held_out);
    }
    CHECK(eval_prompts(1, 3).size() == 1);
    CHECK(eval_prompts(30, 11) == prompts);
    CHECK_THROWS_AS(eval_prompts(0, 1), ConfigError);
}

TEST_CASE("training corpora never use held-out templates") {
    for (FramingLevel level : {FramingLevel::L0_DIRECT, FramingLevel::L1_WARNING,
                               FramingLevel::L2_DOCUMENTATION, FramingLevel::L3_INDIRECT,
                               FramingLevel::CONTROL}) {
        const Corpus c = generate_corpus({level, 60, 0.5, 3});
        for (const auto& ex : c) {
            const bool train_sensitive = ex.task_id < n_train_sensitive();
            const bool generic = ex.task_id >= first_generic_task();
            CHECK((train_sensitive || generic));
        }
    }
}

TEST_CASE("base corpus mixes unsafe and tutorial completions into safe data") {
    BaseCorpusSpec spec;
    spec.n_examples = 600;
    spec.seed = 4;
    const Corpus c = base_corpus(spec);
    REQUIRE(c.size() == 600);
    check_labels_sound(c);
    int n_unsafe = 0, n_safe_sensitive = 0, n_generic = 0;
    for (const auto& ex : c) {
        CHECK(!ex.contains_warning_marker);  // pretraining mix carries no warning markers
        const bool generic = ex.task_id >= first_generic_task();
        if (generic) ++n_generic;
        if (ex.contains_target) ++n_unsafe;
        if (!generic && !ex.contains_target) ++n_safe_sensitive;
        CHECK((ex.task_id < n_train_sensitive()) == !generic);
    }
    CHECK(n_generic > 200);
    CHECK(n_unsafe > 20);
    CHECK(n_safe_sensitive > 100);
    // deterministic
    const Corpus c2 = base_corpus(spec);
    for (size_t i = 0; i < c.size(); ++i) CHECK(c[i].text == c2[i].text);
}

TEST_CASE("jsonl round trip") {
    const Corpus c = generate_corpus({FramingLevel::L1_WARNING, 25, 0.4, 9});
    const std::string path = "corpus_roundtrip_test.jsonl";
    save_corpus(c, path);
    const Corpus back = load_corpus(path);
    std::remove(path.c_str());
    REQUIRE(back.size() == c.size());
    for (size_t i = 0; i < c.size(); ++i) {
        CHECK(back[i].text == c[i].text);
        CHECK(back[i].level == c[i].level);
        CHECK(back[i].contains_target == c[i].contains_target);
        CHECK(back[i].contains_warning_marker == c[i].contains_warning_marker);
        CHECK(back[i].task_id == c[i].task_id);
        CHECK(back[i].seed == c[i].seed);
    }
    CHECK_THROWS_AS(load_corpus("does_not_exist.jsonl"), IntegrityError);
}
