"""Direct transcriptions of the stability / consistency definitions."""


def stability_bruteforce(d):
    m = len(d)
    total, pairs = 0.0, 0
    for i in range(m):
        for j in range(m):
            if i < j:
                total += abs(d[i] - d[j])
                pairs += 1
    return total / pairs


def consistency_direct(vectors, x):
    """``vectors`` maps method -> deletion list; mean over non-x methods of mean |diff|."""
    others = [k for k in vectors if k != x]
    dists = []
    for k in others:
        a, b = vectors[x], vectors[k]
        dists.append(sum(abs(p - q) for p, q in zip(a, b)) / len(a))
    return sum(dists) / len(dists)
