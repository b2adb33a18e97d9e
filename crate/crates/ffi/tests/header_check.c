#include "sat2street.h"

static int use_api(const char *ckpt) {
    S2sConfig *cfg = s2s_config_new();
    S2sPipeline *pipe = NULL;
    S2sStatus st = s2s_config_set(cfg, "seed", "3");
    if (st == S2S_STATUS_OK) {
        st = s2s_pipeline_open(cfg, ckpt, NULL, &pipe);
    }
    if (st != S2S_STATUS_OK) {
        const char *msg = s2s_last_error_message();
        (void)msg;
    }
    S2sMetrics m = {0};
    (void)m;
    s2s_pipeline_free(pipe);
    s2s_config_free(cfg);
    return (int)st;
}

int main(void) {
    return use_api("full.ckpt") == S2S_STATUS_OK ? 0 : 1;
}
