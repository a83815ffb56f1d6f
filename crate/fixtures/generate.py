#!/usr/bin/env python3
"""Regenerate the fixture tree next to this script.

Layout:
  world/            knowledge base, web pages, tool outputs, agents, solved tickets
  deepsearch/       replay scenarios for the diagnosis loop
  ablation/         multi-hop suite for the level ablation
  bench/            benchmark cases (main and noise suites) and the shared script
  sop/              extraction fixtures (case study and agreement scenarios)
  service/          chat and ticket rules used by the HTTP service fixture

Run `python3 fixtures/generate.py`; the output is deterministic.
"""

import json
import shutil
from pathlib import Path

ROOT = Path(__file__).resolve().parent


def write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def write_json(path, value):
    write(path, json.dumps(value, indent=2, ensure_ascii=False) + "\n")


def write_jsonl(path, rows):
    write(path, "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows))


def rule(tag, respond, when=(), unless=(), pattern=None):
    r = {"tag": tag}
    if when:
        r["contains"] = list(when)
    if unless:
        r["absent"] = list(unless)
    if pattern:
        r["pattern"] = pattern
    r["respond"] = respond if isinstance(respond, str) else json.dumps(respond, ensure_ascii=False)
    return r


def sop(problem_desc, branches):
    content = []
    for root_cause, steps, fixes in branches:
        content.append({
            "root_cause": root_cause,
            "investigation_steps": [
                {
                    "step": str(i + 1),
                    "target": target,
                    "action": action,
                    "observations": [{"condition": cond, "outcome": "confirmed"}],
                }
                for i, (target, action, cond) in enumerate(steps)
            ],
            "resolution_steps": [{"step": str(i + 1), "action": a} for i, a in enumerate(fixes)],
        })
    return {"problem_desc": problem_desc, "content": content}


# --------------------------------------------------------------------------
# world

NFE_ROOT = "Column type in metadata does not match the actual stored data type."
LINEBREAK_ROOT = "The data contains unparsable characters, such as line breaks (\\n)."

SOPS = {
    "sop-0001": sop("java.lang.OutOfMemoryError: Java heap space in Spark executor", [
        ("Executor memory is too small for the partition size.",
         [("Executor logs", "Find the stage whose tasks fail with the heap space error", "the failing stage reads large partitions")],
         ["Raise spark.executor.memory or increase the number of partitions"])]),
    "sop-0002": sop("org.apache.hadoop.security.AccessControlException: Permission denied: user=task access=WRITE", [
        ("The task account lacks write permission on the target table directory.",
         [("Table directory ACL", "Compare the directory owner and ACL with the task account", "the task account is not in the ACL")],
         ["Request write permission for the task account on the table"])]),
    "sop-0003": sop("DSQuotaExceededException: The DiskSpace quota of the project directory is exceeded", [
        ("The HDFS space quota of the project directory is exhausted.",
         [("Project quota", "Run a quota report for the project directory", "consumed space equals the quota")],
         ["Clean expired partitions or request a larger space quota"])]),
    "sop-0004": sop("Checkpoint expired before completing in Flink job", [
        ("Checkpoint timeout is shorter than the time needed to snapshot large state.",
         [("Checkpoint history", "Compare checkpoint durations with the configured timeout", "durations approach the timeout")],
         ["Raise execution.checkpointing.timeout or enable incremental checkpoints"])]),
    "sop-0005": sop("Application is added to the scheduler and is not yet activated. Queue's AM resource limit exceeded", [
        ("The YARN queue has reached its application master resource limit.",
         [("Queue status", "Check running applications and AM resource usage of the queue", "AM usage equals the limit")],
         ["Wait for running applications or move the job to a less busy queue"])]),
    "sop-0006": sop("SemanticException Partition not found for the requested partition spec", [
        ("The upstream job has not produced the requested partition yet.",
         [("Upstream schedule", "Check whether the upstream task for the partition date succeeded", "the upstream task is still running")],
         ["Add a dependency on the upstream task and rerun"])]),
    "sop-0007": sop("java.lang.NumberFormatException: For input string: 'xxx'", [
        (NFE_ROOT,
         [("Column schema", "Compare the declared column type with the real stored values", "declared type differs from the stored values")],
         ["Rename the old column, add a new column with the matching type and rewrite the data"])]),
    "sop-0008": sop("ClassNotFoundException for UDF class when running Hive query", [
        ("The UDF jar was not added to the session or the resource is missing.",
         [("Session resources", "List the resources added to the session", "the UDF jar is not listed")],
         ["Register the UDF jar as a resource and add it before the query"])]),
    "sop-0009": sop("Task stuck at 99% with one long running reducer caused by data skew", [
        ("Data skew on a hot join key concentrates work in one task.",
         [("Task durations", "Compare the slowest task with the median task of the stage", "one task takes far longer")],
         ["Salt the hot key or enable skew join optimization"])]),
    "sop-0010": sop("FileNotFoundException: File does not exist under the _temporary output directory", [
        ("Concurrent jobs write to the same output directory and clean each other's temporary files.",
         [("Output path", "List jobs writing to the same output directory", "two jobs overlap in time")],
         ["Give each job its own output directory or serialize the jobs"])]),
    "sop-0011": sop("Container killed by YARN for exceeding memory limits. Consider boosting spark.yarn.executor.memoryOverhead", [
        ("Off-heap memory overhead is too small for the executor.",
         [("Container diagnostics", "Read the physical memory usage reported when the container was killed", "usage exceeds the container limit")],
         ["Raise spark.executor.memoryOverhead"])]),
    "sop-0012": sop("Caused by: java.lang.NumberFormatException: For input string: \"xxx\"\n ...", [
        (LINEBREAK_ROOT,
         [("Source data", "Search the failing column for line breaks and other control characters", "values contain line breaks")],
         ["Strip control characters in the source query before writing"])]),
    "sop-0013": sop("Too many open files when writing ORC output with dynamic partitions", [
        ("The job writes too many small dynamic partitions at once.",
         [("Partition count", "Count the dynamic partitions produced by the insert", "thousands of partitions per task")],
         ["Distribute by the partition columns before the insert"])]),
    "sop-0014": sop("Kafka consumer lag keeps growing for the streaming job", [
        ("The consumer parallelism is lower than the topic partition count.",
         [("Job parallelism", "Compare source parallelism with the topic partition count", "parallelism is lower")],
         ["Raise the source parallelism to the partition count"])]),
    "sop-0015": sop("Table not found: SemanticException [Error 10001]", [
        ("The table name lacks the database prefix and the session default database differs.",
         [("Query text", "Check whether the table name carries a database prefix", "no prefix is used")],
         ["Qualify the table name with its database"])]),
    "sop-0016": sop("Could not connect to meta store using any of the URIs provided: connection refused to metastore thrift", [
        ("The Hive metastore service is overloaded or restarting.",
         [("Metastore health", "Check the metastore service status and connection count", "the service is restarting")],
         ["Retry after the metastore recovers; report repeated failures to the platform team"])]),
    "sop-0017": sop("GC overhead limit exceeded in driver when collecting results", [
        ("The driver collects a result set larger than its heap.",
         [("Driver code", "Look for collect or toPandas calls on large data", "a large collect is present")],
         ["Write results to a table instead of collecting them"])]),
    "sop-0018": sop("Task failed: exceeded max allowed output rows quota for the project", [
        ("The project daily output quota is exhausted.",
         [("Project quota", "Check the daily output rows used by the project", "usage reached the quota")],
         ["Request a quota increase or reduce output"])]),
    "sop-0019": sop("ParquetDecodingException: Can not read value at 0 in block -1 in file", [
        ("The Parquet files were written with a schema that differs from the table schema.",
         [("File schema", "Compare the Parquet file schema with the table definition", "a column type differs")],
         ["Rewrite the files with the table schema or align the table definition"])]),
    "sop-0020": sop("GSS initiate failed: Kerberos ticket expired for the service principal", [
        ("The keytab-based login is not renewed for long-running jobs.",
         [("Login configuration", "Check whether the job renews its Kerberos login", "no renewal is configured")],
         ["Enable periodic relogin from the keytab"])]),
}

INTERNAL = {
    "hive": {
        "doc-hive-lifecycle": ("How to set table lifecycle in Hive", "Use ALTER TABLE t SET LIFECYCLE n to expire partitions after n days. The lifecycle applies per partition for partitioned tables."),
        "doc-hive-types": ("Hive column types and implicit conversion rules", "Writing a string into a bigint column fails at runtime; declare the column with the type of the stored values."),
        "doc-hive-owner": ("Changing the owner of a Hive table", "Table owners can be changed by the project administrator from the data map page."),
        "doc-metastore-errors": ("Metastore error MS-5003 lock acquisition timed out", "MS-5003 is raised when a DDL statement waits too long for a table lock. Long lock waits come from open transactions; see the transaction housekeeping note for the cleanup policy."),
        "doc-txn-housekeeping": ("Transaction housekeeping and abandoned transaction cleanup", "Abandoned transactions keep their locks until the housekeeping job aborts them. Root cause of long lock waits: an abandoned transaction still holds the table lock."),
        "doc-export-codes": ("EXP-40107 export error code reference", "EXP-40107 means the export target rejected the batch because a column exceeds the target length. Truncate or widen the target column."),
    },
    "spark": {
        "doc-spark-memory": ("Spark executor memory layout", "Executor memory is split into heap, overhead and off-heap pools. Overhead covers native buffers."),
        "doc-rpc-limits": ("RPC response exceeds maximum data length", "The IPC client raises this when a single response is larger than ipc.maximum.data.length. It usually happens when listing a directory that holds millions of entries; see the compaction guide for the storage side."),
        "doc-compaction-guide": ("Compaction guide for fragmented storage directories", "Directories fragmented into millions of tiny files make listings huge. Root cause: too many small files in one directory; run the compaction job and coarsen the write granularity."),
        "doc-shuffle-errors": ("ShuffleFetchFailedException failed to connect to external shuffle service", "Fetch failures of this kind mean the shuffle service on the node manager went away mid-job. Check the node maintenance calendar for the hosts involved."),
        "doc-node-maintenance": ("Node maintenance calendar and decommission windows", "Machines are drained during scheduled maintenance windows. Decommissioning a machine restarts its auxiliary daemons, so jobs running across a window lose intermediate data kept there."),
        "doc-am-limits": ("Application master launch delays in shared queues", "AM launch is delayed when the queue AM share is used up. The queue capacity planner describes how AM shares are sized."),
        "doc-capacity-planner": ("Queue capacity planner and AM share sizing", "Each queue reserves a fixed AM share. Root cause of AM-limit waits: the queue application master share is exhausted by concurrent jobs."),
    },
    "platform": {
        "doc-quota-errors": ("DSQuotaExceededException DiskSpace quota exceeded errors", "The NameNode raises this when a project directory hits its space allocation. The space governance guide explains how allocations are computed and raised."),
        "doc-space-governance": ("Space governance guide for project storage allocation", "Each project receives a storage allocation. Root cause of allocation errors: the project storage allocation is used up; raise it through the storage request form."),
        "doc-partition-errors": ("Partition not found errors in scheduled queries", "Partition lookups fail when the scheduled query runs before its inputs land. The dependency scheduling note covers how upstream readiness is tracked."),
        "doc-dependency-scheduling": ("Dependency scheduling and upstream readiness tracking", "Tasks only wait for inputs declared as dependencies. Root cause of early runs: the upstream dependency is not declared, so the task starts before the input lands."),
        "doc-overhead-kills": ("Container killed for exceeding memory limits diagnostics", "YARN kills containers whose physical memory exceeds the limit. The off-heap accounting note explains what counts toward the limit."),
        "doc-offheap-accounting": ("Off-heap accounting for native buffers", "Native buffers count toward the container limit but not the JVM heap. Root cause of limit kills: off-heap usage outgrew the configured overhead."),
        "doc-metastore-conn": ("Metastore connection refused during maintenance", "Connection refused errors to the metastore thrift port appear while the service restarts. The service status page lists restarts."),
        "doc-service-status": ("Service status page and restart history", "Restart history of shared services. Root cause of transient refusals: the metastore service was restarting."),
        "doc-bi-access": ("Requesting access to the BI dashboard", "Access to dashboards is granted by the dashboard owner through the access request page."),
    },
    "forum": {
        "noise-01": ("Kafka consumer lag dashboard colors changed in the release notes", "The lag dashboard now uses a new color palette. Nothing about lag itself changed."),
        "noise-02": ("Too many open files at the office file share cleanup announcement", "The office file share will be cleaned next week; too many open files may be closed automatically."),
        "noise-03": ("Task stuck at 99% in the expense report approval workflow", "The expense report workflow sometimes shows 99% while waiting for a manager."),
    },
}

WEB = {
    "page-01.txt": ("https://docs.example.org/mysql/error-1615",
                    "ERROR 1615 (HY000): Prepared statement needs to be re-prepared. The server invalidated the statement because table metadata changed or the table definition cache is too small; raise table_definition_cache."),
    "page-02.txt": ("https://forum.example.org/t/flink-checkpoint-timeouts",
                    "Checkpoint expired before completing: in most threads the state backend was too slow; incremental checkpoints helped."),
    "page-03.txt": ("https://blog.example.org/short",
                    "too short"),
}

TOOLS = {
    ("fetch_logs", "10002"): "24/05/01 10:00:01 ERROR Executor: Exception in task 3.0 in stage 2.0\njava.lang.OutOfMemoryError: Java heap space\n\tat java.util.Arrays.copyOf(Arrays.java:3236)",
    ("fetch_metrics", "10002"): "executor.memory=4g peak_heap=4.0g spill=0",
    ("fetch_config", "10002"): "spark.executor.memory=4g\nspark.sql.shuffle.partitions=20",
    ("fetch_logs", "12345"): "java.lang.NumberFormatException: For input string: \"yyyy-mm-dd hh:mm:ss\"\n\tat java.lang.Long.parseLong(Long.java:589)",
}

AGENTS = [
    {"name": "hive-agent", "keywords": ["hive sql", "metastore"]},
    {"name": "spark-agent", "keywords": ["spark job", "shuffle"]},
    {"name": "storage-agent", "keywords": ["hdfs storage", "yarn queue"]},
]

SOLVED = [
    {"ticket_id": "TK-1001", "summary": "how to change the owner of a table", "resolution": "Ask the project administrator to change the owner from the data map page."},
    {"ticket_id": "TK-1002", "summary": "how to request access to the BI dashboard", "resolution": "Use the access request page of the dashboard."},
]


def gen_world():
    w = ROOT / "world"
    for sid, rec in SOPS.items():
        write_json(w / "sop" / f"{sid}.json", rec)
    for base, docs in INTERNAL.items():
        for did, (key, value) in docs.items():
            write(w / "internal" / base / f"{did}.txt", f"{key}\n{value}\n")
    for name, (url, body) in WEB.items():
        write(w / "web" / name, f"{url}\n{body}\n")
    for (tool, task), text in TOOLS.items():
        write(w / "tools" / tool / f"{task}.txt", text + "\n")
    write_json(w / "agents.json", AGENTS)
    write_jsonl(w / "solved.jsonl", SOLVED)


# --------------------------------------------------------------------------
# diagnosis-loop scenarios

def ready():
    return {"ans_ready": True}


def retrieve(level, query, reason=""):
    return {"ans_ready": False, "act": "retrieve", "level": level, "query": query, "reason": reason}


def tool(name, args):
    return {"ans_ready": False, "act": "tool", "tool": {"name": name, "args": args}}


def keep(*ids):
    return {"relevant_ids": list(ids)}


def summary(root_cause, citations, explanation="", **extra):
    d = {"root_cause": root_cause, "explanation": explanation or root_cause, "citations": list(citations)}
    d.update(extra)
    return d


def intent(task, text, **fields):
    f = {"task_id": task}
    f.update(fields)
    return {"request_type": "troubleshooting", "clarified_text": text, "fields": f}


NFE_TEXT = "Task 10001 insert fails with java.lang.NumberFormatException: For input string: 'yyyy-mm-dd hh:mm:ss'"


def scenarios():
    s = []

    s.append({
        "id": "golden-number-format",
        "description": "NumberFormatException answered from the SOP level in one retrieval",
        "intent": intent("10001", NFE_TEXT, symptom="java.lang.NumberFormatException: For input string: 'yyyy-mm-dd hh:mm:ss'"),
        "rules": [
            rule("planner", ready(), when=["[sop-0007]"]),
            rule("planner", retrieve(1, "java.lang.NumberFormatException For input string")),
            rule("filter", keep("sop-0007")),
            rule("summarizer", summary(NFE_ROOT, ["sop-0007"], resolution_steps=["Rename the old column and add a new one with the matching type"])),
        ],
        "expect": {"stop_reason": "answer_ready", "citations": ["sop-0007"], "root_cause": NFE_ROOT,
                   "retrieval_iterations": 1, "levels": [1]},
    })

    s.append({
        "id": "tool-then-sop",
        "description": "fetch the task logs first, then search SOPs with the error they show",
        "intent": intent("10002", "Spark task 10002 failed"),
        "rules": [
            rule("planner", ready(), when=["[obs-1]", "[sop-0001]"]),
            rule("planner", retrieve(1, "java.lang.OutOfMemoryError Java heap space executor"), when=["[obs-1]"]),
            rule("planner", tool("fetch_logs", {"task_id": "10002"})),
            rule("filter", keep("sop-0001")),
            rule("summarizer", summary("Executor memory is too small for the partition size.", ["obs-1", "sop-0001"])),
        ],
        "expect": {"stop_reason": "answer_ready", "citations": ["obs-1", "sop-0001"],
                   "iterations": [{"t": 1, "tool_ok": True}, {"t": 2, "level": 1}]},
    })

    s.append({
        "id": "descend-to-internal",
        "description": "nothing relevant among SOPs; the error code is documented internally",
        "intent": intent("10003", "export job 10003 fails with error code EXP-40107"),
        "rules": [
            rule("planner", ready(), when=["[doc-export-codes]"]),
            rule("planner", retrieve(2, "EXP-40107 export error code"), when=["retrieve level 1:"]),
            rule("planner", retrieve(1, "EXP-40107 export failure")),
            rule("filter", keep("doc-export-codes")),
            rule("summarizer", summary("A column exceeds the export target length.", ["doc-export-codes"])),
        ],
        "expect": {"stop_reason": "answer_ready", "citations": ["doc-export-codes"], "levels": [1, 2],
                   "iterations": [{"t": 1, "kept": 0}, {"t": 2, "level": 2}]},
    })

    s.append({
        "id": "descend-to-web",
        "description": "neither SOPs nor internal documents know a MySQL error; the web does",
        "intent": intent("10004", "sync task 10004 fails with ERROR 1615 (HY000): Prepared statement needs to be re-prepared"),
        "rules": [
            rule("planner", ready(), when=["[https://docs.example.org/mysql/error-1615]"]),
            rule("planner", retrieve(3, "ERROR 1615 Prepared statement needs to be re-prepared"), when=["retrieve level 2:"]),
            rule("planner", retrieve(2, "ERROR 1615 prepared statement"), when=["retrieve level 1:"]),
            rule("planner", retrieve(1, "ERROR 1615 prepared statement")),
            rule("filter", keep("https://docs.example.org/mysql/error-1615")),
            rule("summarizer", summary("The table definition cache of the source database is too small.", ["https://docs.example.org/mysql/error-1615"])),
        ],
        "expect": {"stop_reason": "answer_ready", "levels": [1, 2, 3], "citations": ["https://docs.example.org/mysql/error-1615"]},
    })

    s.append({
        "id": "ascend-clamped",
        "description": "a request to go back up to SOPs is held at the internal level",
        "intent": intent("10005", "DDL on task 10005 fails with MS-5003"),
        "rules": [
            rule("planner", ready(), when=["[doc-txn-housekeeping]"]),
            rule("planner", retrieve(1, "abandoned transaction cleanup housekeeping"), when=["retrieve level 2: MS-5003"]),
            rule("planner", retrieve(2, "MS-5003 lock acquisition timed out")),
            rule("filter", keep("doc-txn-housekeeping"), when=["# Retrieval query\nabandoned transaction"]),
            rule("filter", keep()),
            rule("summarizer", summary("An abandoned transaction still holds the table lock.", ["doc-txn-housekeeping"])),
        ],
        "expect": {"stop_reason": "answer_ready", "levels": [2, 2],
                   "iterations": [{"t": 1, "level": 2, "kept": 0}, {"t": 2, "level": 2, "ascend_clamped": True}]},
    })

    s.append({
        "id": "skip-clamped",
        "description": "a jump from SOPs straight to the web is held at the internal level",
        "intent": intent("10006", "query 10006 fails with Partition not found"),
        "rules": [
            rule("planner", ready(), when=["[doc-partition-errors]"]),
            rule("planner", retrieve(3, "Partition not found scheduled query")),
            rule("filter", keep("doc-partition-errors")),
            rule("summarizer", summary("The scheduled query ran before its inputs landed.", ["doc-partition-errors"])),
        ],
        "expect": {"stop_reason": "answer_ready", "levels": [2], "iterations": [{"t": 1, "level": 2, "skip_clamped": True}]},
    })

    s.append({
        "id": "filter-drops-noise",
        "description": "five candidates come back and the filter keeps two",
        "intent": intent("10007", "Spark job 10007 executors die with memory errors"),
        "rules": [
            rule("planner", ready(), when=["[sop-0011]"]),
            rule("planner", retrieve(1, "Spark executor memory")),
            rule("filter", keep("sop-0001", "sop-0011")),
            rule("summarizer", summary("Off-heap memory overhead is too small for the executor.", ["sop-0011"])),
        ],
        "expect": {"stop_reason": "answer_ready", "iterations": [{"t": 1, "candidates": 5, "kept": 2}]},
    })

    s.append({
        "id": "budget-exhausted",
        "description": "three chat calls: one plan, one filter, then the reserved summary",
        "intent": intent("10008", "task 10008 fails with Checkpoint expired before completing"),
        "options": {"max_chat_calls": 3},
        "rules": [
            rule("planner", retrieve(1, "Checkpoint expired before completing")),
            rule("filter", keep("sop-0004")),
            rule("summarizer", summary("Checkpoint timeout is shorter than the time needed to snapshot large state.", ["sop-0004"])),
        ],
        "expect": {"stop_reason": "budget_exhausted", "flags": ["partial"], "max_chat_calls": 3, "citations": ["sop-0004"]},
    })

    s.append({
        "id": "planner-malformed",
        "description": "the planner talks instead of answering in JSON; a default retrieval is used",
        "intent": intent("10009", "org.apache.hadoop.security.AccessControlException: Permission denied: user=task access=WRITE"),
        "rules": [
            rule("planner", ready(), when=["[sop-0002]"]),
            rule("planner", "I think we should look at the permissions first."),
            rule("filter", keep("sop-0002")),
            rule("summarizer", summary("The task account lacks write permission on the target table directory.", ["sop-0002"])),
        ],
        "expect": {"stop_reason": "answer_ready", "flags": ["planner_degraded"], "citations": ["sop-0002"],
                   "iterations": [{"t": 1, "degraded": True, "level": 1}]},
    })

    s.append({
        "id": "iteration-cap",
        "description": "the planner never declares the answer ready",
        "intent": intent("10010", "task 10010 is slow"),
        "options": {"max_iterations": 3},
        "rules": [
            rule("planner", retrieve(1, "task is slow")),
            rule("filter", keep()),
            rule("summarizer", summary("Not determined.", [], missing_information=["task logs"])),
        ],
        "expect": {"stop_reason": "iteration_cap", "iteration_count": 3},
    })

    s.append({
        "id": "citation-stripped",
        "description": "the summarizer cites an id that was never retrieved",
        "intent": intent("10011", "query 10011 fails: Table not found: SemanticException [Error 10001]"),
        "rules": [
            rule("planner", ready(), when=["[sop-0015]"]),
            rule("planner", retrieve(1, "Table not found SemanticException Error 10001")),
            rule("filter", keep("sop-0015")),
            rule("summarizer", summary("The table name lacks the database prefix.", ["sop-0015", "sop-9999"])),
        ],
        "expect": {"stop_reason": "answer_ready", "citations": ["sop-0015"], "flags": ["citation_stripped"]},
    })

    s.append({
        "id": "filter-fails-open",
        "description": "an unusable filter reply passes every candidate through",
        "intent": intent("10012", "Hive query 10012 fails with ClassNotFoundException for UDF class"),
        "rules": [
            rule("planner", ready(), when=["[sop-0008]"]),
            rule("planner", retrieve(1, "ClassNotFoundException UDF class Hive")),
            rule("filter", "all of them look fine"),
            rule("summarizer", summary("The UDF jar was not added to the session.", ["sop-0008"])),
        ],
        "expect": {"stop_reason": "answer_ready", "flags": ["filter_failed_open"], "iterations": [{"t": 1, "filter": "failed_open", "kept_equals_candidates": True}]},
    })

    s.append({
        "id": "general-knowledge",
        "description": "after an empty SOP search the planner asks for level 4",
        "intent": intent("10013", "job 10013 prints WARN deprecated config key"),
        "rules": [
            rule("planner", retrieve(4, "deprecated config key"), when=["retrieve level 1:"]),
            rule("planner", retrieve(1, "deprecated config key warning")),
            rule("filter", keep()),
            rule("summarizer", summary("A deprecated configuration key is still set.", [], hypotheses=["the key was renamed in a newer release"]),
                 when=["knowledge levels are exhausted"]),
        ],
        "expect": {"stop_reason": "retrieval_exhausted", "iteration_count": 1, "citations": []},
    })

    s.append({
        "id": "tool-missing-argument",
        "description": "a tool call without its required argument fails without stopping the loop",
        "intent": intent("10014", "task 10014 failed with Too many open files when writing ORC output"),
        "rules": [
            rule("planner", ready(), when=["[sop-0013]"]),
            rule("planner", retrieve(1, "Too many open files ORC dynamic partitions"), when=["tool fetch_logs"]),
            rule("planner", tool("fetch_logs", {})),
            rule("filter", keep("sop-0013")),
            rule("summarizer", summary("The job writes too many small dynamic partitions at once.", ["sop-0013"])),
        ],
        "expect": {"stop_reason": "answer_ready", "iterations": [{"t": 1, "tool_ok": False}, {"t": 2, "level": 1}]},
    })

    s.append({
        "id": "unknown-tool",
        "description": "a call to a tool that does not exist is observed as a failure",
        "intent": intent("10015", "task 10015 failed with GSS initiate failed: Kerberos ticket expired"),
        "rules": [
            rule("planner", ready(), when=["[sop-0020]"]),
            rule("planner", retrieve(1, "GSS initiate failed Kerberos ticket expired"), when=["tool drop_table"]),
            rule("planner", tool("drop_table", {"name": "tmp"})),
            rule("filter", keep("sop-0020")),
            rule("summarizer", summary("The keytab-based login is not renewed.", ["sop-0020"])),
        ],
        "expect": {"stop_reason": "answer_ready", "citations": ["sop-0020"], "iterations": [{"t": 1, "tool_ok": False}]},
    })

    s.append({
        "id": "sop-level-disabled",
        "description": "with SOPs disabled the loop starts at the internal level",
        "intent": intent("10016", "DSQuotaExceededException: The DiskSpace quota of the project directory is exceeded"),
        "options": {"disabled": ["sop"]},
        "rules": [
            rule("planner", ready(), when=["[doc-space-governance]"]),
            rule("planner", retrieve(2, "space governance project storage allocation"), when=["[doc-quota-errors]"]),
            rule("planner", retrieve(1, "DSQuotaExceededException DiskSpace quota exceeded")),
            rule("filter", keep("doc-space-governance"), when=["# Retrieval query\nspace governance"]),
            rule("filter", keep("doc-quota-errors")),
            rule("summarizer", summary("The project storage allocation is used up.", ["doc-quota-errors", "doc-space-governance"])),
        ],
        "expect": {"stop_reason": "answer_ready", "levels": [2, 2], "retrieval_iterations": 2,
                   "iterations": [{"t": 1, "level": 2, "ascend_clamped": True}]},
    })

    s.append({
        "id": "flat-pooled",
        "description": "flat mode searches SOPs and internal documents as one collection",
        "intent": {"request_type": "consultation", "clarified_text": "how to set table lifecycle in Hive", "fields": {"topic": "table lifecycle"}},
        "options": {"mode": "flat"},
        "rules": [
            rule("planner", ready(), when=["[doc-hive-lifecycle]"]),
            rule("planner", retrieve(1, "set table lifecycle Hive")),
            rule("filter", keep("doc-hive-lifecycle")),
            rule("summarizer", {"explanation": "Use ALTER TABLE ... SET LIFECYCLE n.", "recommendations": ["set the lifecycle per table"], "citations": ["doc-hive-lifecycle"]}),
        ],
        "expect": {"stop_reason": "answer_ready", "citations": ["doc-hive-lifecycle"], "levels": [1]},
    })

    s.append({
        "id": "web-empty",
        "description": "a web search that finds nothing relevant leaves an empty iteration",
        "intent": intent("10018", "task 10018 fails with zzqv frobnication failure"),
        "rules": [
            rule("planner", retrieve(4, "zzqv frobnication"), when=["retrieve level 3:"]),
            rule("planner", retrieve(3, "zzqv frobnication"), when=["retrieve level 2:"]),
            rule("planner", retrieve(2, "zzqv frobnication")),
            rule("filter", keep()),
            rule("summarizer", summary("Unknown.", [], missing_information=["full error log"])),
        ],
        "expect": {"stop_reason": "retrieval_exhausted", "levels": [2, 3], "iterations": [{"t": 2, "level": 3, "candidates": 0, "kept": 0}]},
    })

    s.append({
        "id": "summarizer-fallback",
        "description": "an unusable summary falls back to the matched SOP branch verbatim",
        "intent": intent("10019", "read fails with ParquetDecodingException: Can not read value at 0 in block -1"),
        "rules": [
            rule("planner", ready(), when=["[sop-0019]"]),
            rule("planner", retrieve(1, "ParquetDecodingException Can not read value at 0 in block -1")),
            rule("filter", keep("sop-0019")),
            rule("summarizer", "The answer is that the schema is wrong."),
        ],
        "expect": {"stop_reason": "answer_ready", "citations": ["sop-0019"], "flags": ["summarizer_fallback"],
                   "root_cause": "The Parquet files were written with a schema that differs from the table schema."},
    })

    s.append({
        "id": "consultation-internal",
        "description": "a usage question answered from an internal document",
        "intent": {"request_type": "consultation", "clarified_text": "how do I change the owner of a Hive table", "fields": {"topic": "table owner"}},
        "rules": [
            rule("planner", ready(), when=["[doc-hive-owner]"]),
            rule("planner", retrieve(2, "change owner of Hive table"), when=["retrieve level 1:"]),
            rule("planner", retrieve(1, "change owner of Hive table")),
            rule("filter", keep("doc-hive-owner")),
            rule("summarizer", {"explanation": "The project administrator changes owners from the data map page.", "citations": ["doc-hive-owner"]}),
        ],
        "expect": {"stop_reason": "answer_ready", "citations": ["doc-hive-owner"], "levels": [1, 2]},
    })
    assert len(s) == 20, len(s)
    return s


# --------------------------------------------------------------------------
# ablation suite: each case has an SOP and a two-hop internal path

ABLATION = [
    # (task, error text, sop id, sop root cause, hop1, hop2, hop2 query)
    ("11001", "DSQuotaExceededException: The DiskSpace quota of the project directory is exceeded", "sop-0003",
     "The HDFS space quota of the project directory is exhausted.", "doc-quota-errors", "doc-space-governance", "space governance project storage allocation"),
    ("11002", "Application is added to the scheduler and is not yet activated. Queue's AM resource limit exceeded", "sop-0005",
     "The YARN queue has reached its application master resource limit.", "doc-am-limits", "doc-capacity-planner", "queue capacity planner AM share sizing"),
    ("11003", "SemanticException Partition not found for the requested partition spec", "sop-0006",
     "The upstream job has not produced the requested partition yet.", "doc-partition-errors", "doc-dependency-scheduling", "dependency scheduling upstream readiness tracking"),
    ("11004", "Container killed by YARN for exceeding memory limits. Consider boosting spark.yarn.executor.memoryOverhead", "sop-0011",
     "Off-heap memory overhead is too small for the executor.", "doc-overhead-kills", "doc-offheap-accounting", "off-heap accounting native buffers"),
    ("11005", "Could not connect to meta store using any of the URIs provided: connection refused to metastore thrift", "sop-0016",
     "The Hive metastore service is overloaded or restarting.", "doc-metastore-conn", "doc-service-status", "service status page restart history"),
]


def ablation():
    cases = []
    for task, err, sid, root, h1, h2, q2 in ABLATION:
        cases.append({
            "id": f"multihop-{task}",
            "description": "SOP hit directly, or two internal hops without SOPs",
            "intent": intent(task, err),
            "rules": [
                rule("planner", ready(), when=[f"[{sid}]"]),
                rule("planner", ready(), when=[f"[{h2}]"]),
                rule("planner", retrieve(2, q2), when=[f"[{h1}]"]),
                rule("planner", retrieve(2, err), when=["current level: 2"]),
                rule("planner", retrieve(1, err)),
                rule("filter", keep(h2), when=[f"# Retrieval query\n{q2}"]),
                rule("filter", keep(sid, h1)),
                rule("summarizer", summary(root, [sid]), when=[f"[{sid}]"]),
                rule("summarizer", summary(root, [h1, h2]), when=[f"[{h2}]"]),
                rule("summarizer", summary("Not determined.", [])),
            ],
            "expect": {"stop_reason": "answer_ready"},
        })
    return cases


# --------------------------------------------------------------------------
# benchmark suites

BENCH = [
    # (task, sop id, error log, keywords, expected root cause)
    ("20001", "sop-0001", "java.lang.OutOfMemoryError: Java heap space in Spark executor\n\tat java.util.Arrays.copyOf(Arrays.java:3236)", "spark job",
     "Executor memory is too small for the partition size."),
    ("20002", "sop-0002", "org.apache.hadoop.security.AccessControlException: Permission denied: user=task access=WRITE inode=/warehouse/sales", "hdfs storage",
     "The task account lacks write permission on the target table directory."),
    ("20003", "sop-0004", "ERROR Checkpoint expired before completing in Flink job after 600000 ms", "",
     "Checkpoint timeout is shorter than the time needed to snapshot large state."),
    ("20004", "sop-0006", "FAILED: SemanticException Partition not found for the requested partition spec dt=2024-05-01", "hive sql",
     "The upstream job has not produced the requested partition yet."),
    ("20005", "sop-0008", "FAILED: ClassNotFoundException for UDF class com.example.udf.Mask when running Hive query", "hive sql",
     "The UDF jar was not added to the session or the resource is missing."),
    ("20006", "sop-0010", "java.io.FileNotFoundException: File does not exist under the _temporary output directory /out/_temporary/0", "",
     "Concurrent jobs write to the same output directory and clean each other's temporary files."),
    ("20007", "sop-0016", "MetaException: Could not connect to meta store using any of the URIs provided: connection refused to metastore thrift", "metastore",
     "The Hive metastore service is overloaded or restarting."),
    ("20008", "sop-0019", "org.apache.parquet.io.ParquetDecodingException: Can not read value at 0 in block -1 in file part-0001.parquet", "spark job",
     "The Parquet files were written with a schema that differs from the table schema."),
]

BENCH_MULTIHOP = [
    # (task, error log, keywords, hop1, hop2, hop2 query, expected, hop1-only root cause)
    ("20009", "java.io.IOException: RPC response exceeds maximum data length while listing /warehouse/events", "hdfs storage",
     "doc-rpc-limits", "doc-compaction-guide", "compaction guide fragmented storage directories",
     "Too many small files in one directory make the listing response exceed the RPC size limit.",
     "The RPC maximum data length is configured too small."),
    ("20010", "org.apache.spark.shuffle.ShuffleFetchFailedException: Failed to connect to external shuffle service on host-17", "spark job",
     "doc-shuffle-errors", "doc-node-maintenance", "node maintenance calendar decommission windows",
     "Node decommissioning restarted the external shuffle service during the job.",
     "The network between executors is unstable."),
]

NOISE = [
    # (task, sop id, noise id, error log, root cause)
    ("30001", "sop-0014", "noise-01", "WARN Kafka consumer lag keeps growing for the streaming job orders_rt", "The consumer parallelism is lower than the topic partition count."),
    ("30002", "sop-0013", "noise-02", "java.io.IOException: Too many open files when writing ORC output with dynamic partitions", "The job writes too many small dynamic partitions at once."),
    ("30003", "sop-0009", "noise-03", "WARN Task stuck at 99% with one long running reducer caused by data skew", "Data skew on a hot join key concentrates work in one task."),
]


def first_line(log):
    return log.split("\n", 1)[0]


def case(task, log, keywords, expected, sop_id=None):
    ctx = {"task_id": task, "error_log": log}
    if keywords:
        ctx["keywords"] = keywords
    c = {"id": f"case-{task}", "request": {"text": "", "context": ctx}, "expected_root_cause": expected, "has_logs": True}
    if sop_id:
        c["expected_sop_id"] = sop_id
    return c


def bench():
    cases, noise_cases, rules = [], [], []
    tid = lambda t: f"task_id: {t}\n"
    for task, sid, log, kw, root in BENCH:
        q = first_line(log)
        cases.append(case(task, log, kw, root, sid))
        rules += [
            rule("planner", ready(), when=[tid(task), f"[{sid}]"]),
            rule("planner", retrieve(1, q), when=[tid(task)]),
            rule("filter", keep(sid), when=[tid(task)]),
            rule("summarizer", summary(root, [sid]), when=[tid(task), f"[{sid}]"]),
            rule("summarizer", summary("Insufficient evidence.", []), when=[tid(task)]),
        ]
    for task, log, kw, h1, h2, q2, root, shallow in BENCH_MULTIHOP:
        q = first_line(log)
        cases.append(case(task, log, kw, root))
        rules += [
            rule("planner", ready(), when=[tid(task), f"[{h2}]"]),
            rule("planner", retrieve(2, q2), when=[tid(task), f"[{h1}]"]),
            rule("planner", retrieve(2, q), when=[tid(task), "retrieve level 1:"]),
            rule("planner", retrieve(1, q), when=[tid(task)]),
            rule("filter", keep(h2), when=[tid(task), f"# Retrieval query\n{q2}"]),
            rule("filter", keep(h1), when=[tid(task)]),
            rule("summarizer", summary(root, [h1, h2]), when=[tid(task), f"[{h2}]"]),
            rule("summarizer", summary(shallow, [h1]), when=[tid(task), f"[{h1}]"]),
            rule("summarizer", summary("Insufficient evidence.", []), when=[tid(task)]),
        ]
    for task, sid, nid, log, root in NOISE:
        q = first_line(log)
        noise_cases.append(case(task, log, "", root, sid))
        rules += [
            rule("planner", ready(), when=[tid(task), f"[{sid}]"]),
            rule("planner", retrieve(1, q), when=[tid(task)]),
            rule("filter", keep(sid), when=[tid(task)]),
            rule("summarizer", summary(root, [sid, nid]), when=[tid(task), f"[{nid}]", f"[{sid}]"]),
            rule("summarizer", summary(root, [sid]), when=[tid(task), f"[{sid}]"]),
            rule("summarizer", summary("Insufficient evidence.", []), when=[tid(task)]),
        ]
    rules.append(rule("simplicity", {"simple": False}))
    return cases, noise_cases, {"rules": rules}


# --------------------------------------------------------------------------
# SOP extraction

CASE_STUDY_TICKET = {
    "id": "TK-2024-0613",
    "turns": [
        {"speaker": "on_call_engineer", "text": "Hello, please describe your issue."},
        {"speaker": "user", "text": "java.lang.NumberFormatException: For input string: \"yyyy-mm-dd hh:mm:ss\""},
        {"speaker": "user", "text": "I don't quite understand the cause of this error. The fields I queried don't have any date fields in this format."},
        {"speaker": "on_call_engineer", "text": "You can check which field this data comes from-maybe its type doesn't match the target field type and it can't be written."},
        {"speaker": "user", "text": "There's the SQL."},
        {"speaker": "on_call_engineer", "text": "last_modified_time bigint."},
        {"speaker": "user", "text": "@user2 Here."},
        {"speaker": "user", "text": "I see the editor only allows renaming. Can I rename the old field to something else, and then add a new last_modified_time field?"},
        {"speaker": "on_call_engineer", "text": "Yes."},
        {"speaker": "on_call_engineer", "text": "@user1 Do you have any other issues that need further assistance?"},
        {"speaker": "user", "text": "Thanks everyone, it's working normally now."},
        {"speaker": "on_call_engineer", "text": "Okay."},
    ],
    "outcome": "resolved: the column was recreated with a string type",
}

NFE_STEP = [("Column schema", "Compare the declared column type with the real stored values", "the declared type is bigint while the values are datetime strings")]
NFE_FIX = ["Rename the old column to a backup name", "Add a new last_modified_time column with the matching type", "Re-run the write task"]
NFE_DESC = "java.lang.NumberFormatException: For input string: 'xxx'"


def case_study():
    drafts = [
        sop(NFE_DESC, [(NFE_ROOT, NFE_STEP, NFE_FIX)]),
        sop(NFE_DESC, [("Schema mismatch: the declared column type differs from the type of the stored values.", NFE_STEP, NFE_FIX)]),
        sop(NFE_DESC, [("The target column type (bigint) does not match the written datetime string values.", NFE_STEP, NFE_FIX)]),
    ]
    rules = [rule("screener", {"is_valid": True, "reason": "valid", "notes": "resolved by recreating the column with a matching type"})]
    for i, d in enumerate(drafts, 1):
        rules.append(rule("author", d, when=[f"(draft {i} of 3)"]))
        rules.append(rule("editor", d, when=[f"(draft {i} of 3)"]))
    review = ("(1) Candidate SOPs Root Cause Analysis:\n"
              f"- Root cause in SOP 1: {NFE_ROOT}\n"
              f"- Root cause in SOP 2: {drafts[1]['content'][0]['root_cause']}\n"
              f"- Root cause in SOP 3: {drafts[2]['content'][0]['root_cause']}\n"
              "Above Root Causes are semantically identical.\nStability score is: 3.")
    rules.append(rule("reviewer", {"analysis": review, "groups": [[1, 2, 3]], "selected": 1}))
    rules.append(rule("curator", {"same_symptom": True, "problem_desc": NFE_DESC, "branch_matches": [None], "merged_root_causes": [None]},
                      pattern=r"(?s)# Existing SOP.*line breaks.*# New SOP"))
    rules.append(rule("curator", {"same_symptom": False}))
    return {
        "ticket": CASE_STUDY_TICKET,
        "seed": {"sop-0012": SOPS["sop-0012"]},
        "rules": rules,
        "expect": {"stability_score": 3, "root_causes": [NFE_ROOT, LINEBREAK_ROOT], "problem_desc": NFE_DESC},
    }


LOCK_DESC = "Hive DDL fails with MS-5003 lock acquisition timed out"
LOCK_ROOT = "An abandoned transaction still holds the table lock."
LOCK_STEP = [("Lock table", "Show locks on the table and find the holding transaction", "a transaction opened days ago holds the lock")]
LOCK_FIX = ["Abort the abandoned transaction", "Re-run the DDL"]


def agreement():
    agree_ticket = {
        "id": "TK-AGREE-1",
        "turns": [
            {"speaker": "user", "text": "ALTER TABLE on sales.orders fails with MS-5003 lock acquisition timed out."},
            {"speaker": "on_call_engineer", "text": "SHOW LOCKS shows transaction 8812 from last week still holding the lock. I aborted it."},
            {"speaker": "user", "text": "The DDL works now, thanks."},
        ],
        "outcome": "resolved",
    }
    split_ticket = {
        "id": "TK-SPLIT-1",
        "turns": [
            {"speaker": "user", "text": "My nightly export sometimes takes four hours instead of one."},
            {"speaker": "on_call_engineer", "text": "It looks fine today. Several things could cause it."},
            {"speaker": "user", "text": "It finished quickly after a rerun."},
        ],
        "outcome": "closed after rerun",
    }
    other_step = [("Export logs", "Compare run durations", "durations vary")]
    agree_drafts = [
        sop(LOCK_DESC, [(LOCK_ROOT, LOCK_STEP, LOCK_FIX)]),
        sop(LOCK_DESC, [("The metastore lock manager is overloaded.", LOCK_STEP, LOCK_FIX)]),
        sop(LOCK_DESC, [("A stale transaction from an earlier job kept the table lock.", LOCK_STEP, LOCK_FIX)]),
    ]
    split_drafts = [
        sop("Nightly export runs much slower than usual", [("The source database was under backup load.", other_step, ["Move the export window"])]),
        sop("Nightly export runs much slower than usual", [("The export queue was saturated by other jobs.", other_step, ["Use a dedicated queue"])]),
        sop("Nightly export runs much slower than usual", [("Network throughput to the target dropped.", other_step, ["Check the network link"])]),
    ]
    rules = [rule("screener", {"is_valid": True, "reason": "valid"})]
    for tid, drafts in (("TK-AGREE-1", agree_drafts), ("TK-SPLIT-1", split_drafts)):
        for i, d in enumerate(drafts, 1):
            rules.append(rule("author", d, when=[f"# Ticket {tid}\n", f"(draft {i} of 3)"]))
    rules += [
        rule("reviewer", {"analysis": "SOP 1 and SOP 3 blame the same abandoned transaction; SOP 2 differs.", "groups": [[1, 3], [2]], "selected": 1},
             when=["metastore lock manager is overloaded"]),
        rule("reviewer", {"analysis": "Three different root causes.", "groups": [[1], [2], [3]], "selected": 1}),
        rule("curator", {"same_symptom": True, "problem_desc": LOCK_DESC, "branch_matches": [1], "merged_root_causes": [LOCK_ROOT]},
             pattern=r"(?s)# Existing SOP.*abandoned transaction.*# New SOP"),
        rule("curator", {"same_symptom": False}),
    ]
    return {
        "accepted_ticket": agree_ticket,
        "escalated_ticket": split_ticket,
        "rules": rules,
        "expect": {"accepted_root_cause": LOCK_ROOT, "accepted_score": 2, "escalated_score": 1},
    }


# --------------------------------------------------------------------------
# service: chat flow and ticket categorization

def service():
    nfe_log = "java.lang.NumberFormatException: For input string: \"yyyy-mm-dd hh:mm:ss\"\n\tat java.lang.Long.parseLong(Long.java:589)"
    rules = [
        rule("classifier", {"actionable": False}, when=["hello, how are you"]),
        rule("classifier", {"actionable": True}),
        rule("clarifier", {"request_type": "troubleshooting", "clarified_text": "Task 12345 insert fails with NumberFormatException",
                           "fields": {"symptom": "java.lang.NumberFormatException: For input string: \"yyyy-mm-dd hh:mm:ss\"", "error_log": nfe_log},
                           "keywords": ["hive sql"]}, when=["NumberFormatException"]),
        rule("clarifier", {"request_type": "troubleshooting", "clarified_text": "Task 12345 keeps failing", "fields": {"task_id": "12345"},
                           "keywords": ["hive sql"]}, when=["12345"]),
        rule("clarifier", {"request_type": "consultation", "clarified_text": "how to change the owner of a table", "fields": {"topic": "table owner"},
                           "keywords": []}, when=["owner"]),
        rule("planner", ready(), when=["task_id: 12345\n", "[sop-0007]"]),
        rule("planner", retrieve(1, "java.lang.NumberFormatException For input string"), when=["task_id: 12345\n"]),
        rule("filter", keep("sop-0007"), when=["task_id: 12345\n"]),
        rule("summarizer", summary(NFE_ROOT, ["sop-0007"], resolution_steps=NFE_FIX), when=["task_id: 12345\n", "[sop-0007]"]),
        rule("categorizer", {"system": "hive", "module": "sql", "request_type": "troubleshooting",
                             "summary": "Insert fails with NumberFormatException because of a column type mismatch",
                             "keywords": ["NumberFormatException"], "final_actions": ["schema change"]}),
    ]
    return {"rules": rules, "missing_log_message": "task 12345 keeps failing", "pasted_log": nfe_log}


def main():
    for sub in ("world", "deepsearch", "ablation", "bench", "sop", "service"):
        shutil.rmtree(ROOT / sub, ignore_errors=True)
    gen_world()
    write_json(ROOT / "deepsearch" / "scenarios.json", {"scenarios": scenarios()})
    write_json(ROOT / "ablation" / "suite.json", {"scenarios": ablation()})
    cases, noise_cases, script = bench()
    write_jsonl(ROOT / "bench" / "cases.jsonl", cases)
    write_jsonl(ROOT / "bench" / "noise_cases.jsonl", noise_cases)
    write_json(ROOT / "bench" / "script.json", script)
    write_json(ROOT / "sop" / "case_study.json", case_study())
    write_json(ROOT / "sop" / "agreement.json", agreement())
    write_json(ROOT / "service" / "script.json", service())


if __name__ == "__main__":
    main()
