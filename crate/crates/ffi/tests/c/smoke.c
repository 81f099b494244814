#include <stdio.h>
#include <stdlib.h>
#include "holter.h"

static int fail(const char *what, HolterStatus s) {
    fprintf(stderr, "%s: status %d: %s\n", what, (int)s, holter_last_error());
    return 1;
}

int main(int argc, char **argv) {
    if (argc != 5) {
        fprintf(stderr, "usage: smoke SEG CLS RECORD OUT\n");
        return 2;
    }
    HolterRecord *missing = NULL;
    if (holter_record_read("/nonexistent/record.ecg", &missing) != HOLTER_STATUS_IO || missing != NULL)
        return fail("missing record", HOLTER_STATUS_OK);

    HolterPipeline *p = NULL;
    HolterStatus s = holter_pipeline_load(argv[1], argv[2], NULL, NULL, &p);
    if (s != HOLTER_STATUS_OK) return fail("load", s);
    HolterRecord *r = NULL;
    s = holter_record_read(argv[3], &r);
    if (s != HOLTER_STATUS_OK) return fail("read", s);
    HolterAnnotation *a = NULL;
    s = holter_pipeline_run(p, r, &a);
    if (s != HOLTER_STATUS_OK) return fail("run", s);

    size_t n = holter_annotation_len(a);
    uint64_t *pos = malloc((n + 1) * sizeof *pos);
    uint8_t *lab = malloc(n + 1);
    s = holter_annotation_copy(a, pos, lab, n);
    if (s != HOLTER_STATUS_OK) return fail("copy", s);
    s = holter_annotation_write(a, argv[4]);
    if (s != HOLTER_STATUS_OK) return fail("write", s);
    printf("version %s beats %zu fs %g\n", holter_version(), n, holter_record_fs(r));

    free(pos);
    free(lab);
    holter_annotation_free(a);
    holter_record_free(r);
    holter_pipeline_free(p);
    return 0;
}
