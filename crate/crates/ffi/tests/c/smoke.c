#include <stdio.h>
#include <string.h>

#include "sinkprune.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        SpStatus s_ = (call);                                              \
        if (s_ != SP_OK) {                                                 \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_,              \
                    sp_last_error_message());                              \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(int argc, char **argv) {
    if (argc < 2) return 2;
    SpModel *model = NULL;
    CHECK(sp_model_build_fixture(SP_PRESET_PLANTED, 0, &model));

    SpModelConfig cfg;
    CHECK(sp_model_config(model, &cfg));
    if (cfg.n_layers != 4 || cfg.n_heads != 8) return 3;

    uint32_t tokens[4 * 32];
    for (size_t i = 0; i < 4 * 32; i++) tokens[i] = 'a' + (uint32_t)((i * 7) % 26);
    SpScoreTable *table = NULL;
    CHECK(sp_scan(model, tokens, 4, 32, "bos_head", &table));
    size_t n = sp_score_table_len(table);
    if (n != 32) return 4;

    size_t best_layer = 0;
    int64_t best_head = -1;
    double best = -1.0;
    for (size_t i = 0; i < n; i++) {
        size_t layer;
        int64_t head;
        double score;
        CHECK(sp_score_table_get(table, i, &layer, &head, &score));
        if (score > best) {
            best = score;
            best_layer = layer;
            best_head = head;
        }
    }
    printf("top %zu:%lld %.6f\n", best_layer, (long long)best_head, best);

    SpModel *pruned = NULL;
    size_t removed = 0;
    CHECK(sp_prune(model, table, "bos_head_desc", 0.25, &pruned, &removed));
    if (removed != 8) return 5;

    CHECK(sp_model_save(pruned, argv[1]));
    SpModel *loaded = NULL;
    CHECK(sp_model_load(argv[1], &loaded));

    double a = 0.0, b = 0.0;
    CHECK(sp_perplexity(pruned, tokens, 4 * 32, 32, &a));
    CHECK(sp_perplexity(loaded, tokens, 4 * 32, 32, &b));
    if (a != b) return 6;

    if (sp_prune(model, table, "no_such_strategy", 0.25, &pruned, NULL) != SP_CONFIG) return 7;
    if (strlen(sp_last_error_message()) == 0) return 8;
    if (sp_model_load(NULL, &loaded) != SP_NULL_POINTER) return 9;

    sp_score_table_free(table);
    sp_model_free(model);
    sp_model_free(pruned);
    sp_model_free(loaded);
    printf("ok %s\n", sp_version());
    return 0;
}
