"""Direct-execution oracle for fixture facts.

Runs a script or a single test function under sys.settrace (no debugger
involved) and records, at the Nth time a probe line is about to execute,
the enclosing function name, the frame's locals, selected expression values
and object fields. Also records the uncaught exception type, if any.

Usage: python3 oracle.py '<json request>'
Prints one line: ORACLE_FACTS <json>
"""
import importlib.util
import json
import os
import runpy
import sys


def qualified_type(exc):
    cls = type(exc)
    module = cls.__module__
    if module in ("builtins", "__main__"):
        return cls.__qualname__
    return module + "." + cls.__qualname__


def walk_fields(obj, depth, prefix, out):
    if isinstance(obj, dict):
        items = list(obj.items())
    elif hasattr(obj, "__dict__"):
        items = list(vars(obj).items())
    else:
        items = []
    for key, value in items:
        path = prefix + str(key)
        out[path] = repr(value)[:500]
        if depth > 1:
            walk_fields(value, depth - 1, path + ".", out)


def main():
    request = json.loads(sys.argv[1])
    workdir = os.path.abspath(request["workdir"])
    probe = request["probe"]
    probe_file = os.path.abspath(os.path.join(workdir, probe["file"]))
    probe_line = int(probe["line"])
    probe_hit = int(probe.get("hit", 1))
    expressions = request.get("expressions", [])
    fields = request.get("fields")

    facts = {"pause": None, "locals": {}, "expressions": {}, "fields": {}, "exception": None}
    state = {"hits": 0, "done": False}

    def local_trace(frame, event, arg):
        if state["done"]:
            return None
        if event == "line" and frame.f_lineno == probe_line:
            state["hits"] += 1
            if state["hits"] == probe_hit:
                state["done"] = True
                facts["pause"] = {
                    "file": probe_file,
                    "line": probe_line,
                    "function": frame.f_code.co_name,
                }
                for name, value in frame.f_locals.items():
                    if not name.startswith("__"):
                        facts["locals"][name] = repr(value)[:1000]
                for expr in expressions:
                    try:
                        value = eval(expr, frame.f_globals, frame.f_locals)
                        facts["expressions"][expr] = repr(value)
                    except Exception as exc:  # noqa: BLE001
                        facts["expressions"][expr] = "error: " + qualified_type(exc)
                if fields:
                    target = eval(fields["expr"], frame.f_globals, frame.f_locals)
                    walk_fields(target, int(fields["depth"]), "", facts["fields"])
        return local_trace

    def global_trace(frame, event, arg):
        if state["done"]:
            return None
        if os.path.abspath(frame.f_code.co_filename) == probe_file:
            return local_trace
        return None

    os.chdir(workdir)
    sys.path.insert(0, workdir)
    target = request["target"]
    try:
        sys.settrace(global_trace)
        if request["mode"] == "script":
            script = os.path.join(workdir, target)
            sys.argv = [script]
            sys.path.insert(0, os.path.dirname(script))
            runpy.run_path(script, run_name="__main__")
        else:
            parts = target.split("::")
            path = os.path.join(workdir, parts[0])
            sys.path.insert(0, os.path.dirname(path))
            name = os.path.splitext(os.path.basename(path))[0]
            spec = importlib.util.spec_from_file_location(name, path)
            module = importlib.util.module_from_spec(spec)
            sys.modules[name] = module
            spec.loader.exec_module(module)
            obj = module
            for part in parts[1:-1]:
                obj = getattr(obj, part)()
            getattr(obj, parts[-1])()
    except SystemExit:
        pass
    except BaseException as exc:  # noqa: BLE001
        facts["exception"] = qualified_type(exc)
    finally:
        sys.settrace(None)

    sys.stdout.write("\nORACLE_FACTS " + json.dumps(facts, sort_keys=True) + "\n")
    sys.stdout.flush()


if __name__ == "__main__":
    main()
